// SPDX-License-Identifier: Apache-2.0

//! Reference anchor and benchmark harness for the `c4run` runtime.

pub mod anchor;
pub mod bench;
