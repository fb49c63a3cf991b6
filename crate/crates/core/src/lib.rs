// SPDX-License-Identifier: Apache-2.0

//! Runtime core for composite confidential workloads: lifecycle algebra,
//! persistent state directory, authenticated stage protocol, execution
//! backends and the serve pipeline.

pub mod backend;
pub mod bundle;
pub mod crash;
pub mod fsutil;
pub mod lifecycle;
pub mod process;
pub mod protocol;
pub mod runtime;
pub mod serve;
pub mod store;
