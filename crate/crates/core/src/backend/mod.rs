// SPDX-License-Identifier: Apache-2.0

//! Stage execution backends.
//!
//! Every backend goes through the same three calls: `prepare` provisions an
//! isolated context for one invocation, `execute` runs the stage in it, and
//! `destroy` tears it down (idempotent).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, StageSpec};
use crate::lifecycle::TrustEvidence;

mod ledger;
pub mod localexec;
pub mod sim;

pub use ledger::{ExecutionLedger, LedgerEntry, LEDGER_ENV};
pub use localexec::LocalExecBackend;
pub use sim::{FaultPolicy, Latency, SimBackend};

pub const RC_TIMEOUT: i32 = 124;
pub const RC_RECOVERY_AMBIGUOUS: i32 = 125;
pub const RC_PREPARE_FAILED: i32 = 126;
pub const RC_STAGE_NOT_FOUND: i32 = 127;
pub const RC_CANCELLED: i32 = 130;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("stage not found: {0}")]
    StageNotFound(String),
    #[error("prepare failed: {0}")]
    PrepareFailed(String),
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
}

impl BackendError {
    pub fn rc(&self) -> i32 {
        match self {
            BackendError::StageNotFound(_) => RC_STAGE_NOT_FOUND,
            _ => RC_PREPARE_FAILED,
        }
    }

    pub fn failure(&self) -> &'static str {
        match self {
            BackendError::StageNotFound(_) => "stage_not_found",
            _ => "prepare_failed",
        }
    }
}

/// Evidence reported by a backend for one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub tee_type: String,
    pub evidence_type: String,
    pub measurement_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Evidence {
    /// Maps backend evidence to trust inputs. Binding holds when the
    /// evidence names the instance and invocation it was produced for.
    pub fn trust_inputs(&self, cid: &str, eid: &str) -> TrustEvidence {
        TrustEvidence {
            attestation: self.extra.get("attestation").map(|a| a == "ok"),
            measurement: Some(self.measurement_hash.clone()).filter(|m| !m.is_empty()),
            binding: Some(
                self.extra.get("cid").map(String::as_str) == Some(cid)
                    && self.extra.get("eid").map(String::as_str) == Some(eid),
            ),
        }
    }
}

/// Per-invocation context returned by `prepare`.
#[derive(Debug, Clone)]
pub struct BackendHandle {
    pub cid: String,
    pub eid: String,
    pub stage: String,
    pub spec: StageSpec,
}

pub struct ExecRequest<'a> {
    pub request_id: &'a str,
    pub payload: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub rc: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub evidence: Option<Evidence>,
    /// Set when the stage did not run to its own completion: `timeout` or
    /// `cancelled`.
    pub failure: Option<String>,
}

impl StageOutcome {
    pub fn timed_out(stdout: Vec<u8>, stderr: Vec<u8>) -> Self {
        Self {
            rc: RC_TIMEOUT,
            stdout,
            stderr,
            evidence: None,
            failure: Some("timeout".into()),
        }
    }

    pub fn cancelled(stdout: Vec<u8>, stderr: Vec<u8>) -> Self {
        Self {
            rc: RC_CANCELLED,
            stdout,
            stderr,
            evidence: None,
            failure: Some("cancelled".into()),
        }
    }
}

/// Cooperative cancellation flag shared between a worker and its backend.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    /// Sleeps up to `d`; returns `false` if cancelled first.
    pub fn sleep(&self, d: Duration) -> bool {
        let deadline = Instant::now() + d;
        loop {
            if self.is_cancelled() {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            std::thread::sleep((deadline - now).min(Duration::from_millis(5)));
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn prepare(&self, cid: &str, eid: &str, stage: &str) -> Result<BackendHandle, BackendError>;

    fn execute(
        &self,
        handle: &BackendHandle,
        req: &ExecRequest<'_>,
        cancel: &CancelToken,
    ) -> StageOutcome;

    fn destroy(&self, handle: &BackendHandle);
}

/// Builds the backend named by `id`, or by the bundle when `id` is `None`.
pub fn for_bundle(
    bundle: &Bundle,
    id: Option<&str>,
    faults: FaultPolicy,
) -> Result<Arc<dyn Backend>, BackendError> {
    let id = id.unwrap_or(&bundle.config.c4.backend_id);
    match id {
        "sim" => Ok(Arc::new(SimBackend::new(
            bundle.config.c4.stage_table.clone(),
            faults,
        ))),
        "localexec" => Ok(Arc::new(LocalExecBackend::new(bundle.clone()))),
        other => Err(BackendError::UnknownBackend(other.to_string())),
    }
}

fn lookup_stage<'a>(
    table: &'a BTreeMap<String, StageSpec>,
    stage: &str,
) -> Result<&'a StageSpec, BackendError> {
    table
        .get(stage)
        .ok_or_else(|| BackendError::StageNotFound(stage.to_string()))
}
