// SPDX-License-Identifier: Apache-2.0

//! In-process simulator backend with configurable faults.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes128Gcm, KeyInit, Nonce};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::{
    lookup_stage, Backend, BackendError, BackendHandle, CancelToken, Evidence, ExecRequest,
    StageOutcome,
};
use crate::bundle::StageSpec;

pub const DEFAULT_AESGCM_BYTES: u64 = 4096;
pub const DEFAULT_AESGCM_SEED: &str = "c4";
pub const DEFAULT_SLEEP_MS: u64 = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Latency {
    #[default]
    None,
    Fixed(u64),
    Uniform(u64, u64),
}

impl Latency {
    fn sample(self) -> Duration {
        Duration::from_millis(match self {
            Latency::None => 0,
            Latency::Fixed(ms) => ms,
            Latency::Uniform(lo, hi) => rand::thread_rng().gen_range(lo..=hi.max(lo)),
        })
    }
}

/// Injected faults. `fail_prepare_after = Some(n)` lets the first `n`
/// prepares succeed and fails every later one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultPolicy {
    pub fail_prepare_after: Option<u64>,
    pub execute_latency: Latency,
    pub rc_override: Option<i32>,
}

pub struct SimBackend {
    table: BTreeMap<String, StageSpec>,
    faults: FaultPolicy,
    prepares: AtomicU64,
}

impl SimBackend {
    pub fn new(table: BTreeMap<String, StageSpec>, faults: FaultPolicy) -> Self {
        Self {
            table,
            faults,
            prepares: AtomicU64::new(0),
        }
    }
}

/// Deterministic AES-128-GCM workload: encrypts `n` bytes of a SHA-256
/// counter stream seeded by `seed` and returns the tag.
pub fn aesgcm_tag(seed: &[u8], n: u64) -> [u8; 16] {
    let mut plaintext = Vec::with_capacity(n as usize);
    let mut i: u64 = 0;
    while (plaintext.len() as u64) < n {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(i.to_be_bytes());
        plaintext.extend_from_slice(&h.finalize());
        i += 1;
    }
    plaintext.truncate(n as usize);
    let key = Sha256::digest(b"c4-aesgcm-key");
    let nonce = Sha256::digest(b"c4-aesgcm-nonce");
    let cipher = Aes128Gcm::new_from_slice(&key[..16]).expect("16-byte key");
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce[..12]), b"", &mut plaintext)
        .expect("gcm accepts this length");
    tag.into()
}

fn measurement(behavior: &str, spec: &StageSpec) -> String {
    let mut h = Sha256::new();
    h.update(behavior.as_bytes());
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    hex::encode(h.finalize())
}

impl Backend for SimBackend {
    fn id(&self) -> &str {
        "sim"
    }

    fn prepare(&self, cid: &str, eid: &str, stage: &str) -> Result<BackendHandle, BackendError> {
        let spec = lookup_stage(&self.table, stage)?;
        match spec.behavior.as_deref() {
            Some("hello" | "aesgcm" | "fail" | "sleep") => {}
            Some(other) => {
                return Err(BackendError::PrepareFailed(format!(
                    "unknown behavior {other:?}"
                )))
            }
            None => {
                return Err(BackendError::PrepareFailed(format!(
                    "stage {stage} has no simulator behavior"
                )))
            }
        }
        let n = self.prepares.fetch_add(1, Ordering::SeqCst);
        if let Some(limit) = self.faults.fail_prepare_after {
            if n >= limit {
                return Err(BackendError::PrepareFailed("injected prepare fault".into()));
            }
        }
        Ok(BackendHandle {
            cid: cid.to_string(),
            eid: eid.to_string(),
            stage: stage.to_string(),
            spec: spec.clone(),
        })
    }

    fn execute(
        &self,
        handle: &BackendHandle,
        _req: &ExecRequest<'_>,
        cancel: &CancelToken,
    ) -> StageOutcome {
        let spec = &handle.spec;
        let behavior = spec.behavior.as_deref().unwrap_or_default();
        let timeout = spec.timeout_ms.map(Duration::from_millis);

        let latency = self.faults.execute_latency.sample();
        let mut busy = latency;
        if behavior == "sleep" {
            busy += Duration::from_millis(spec.delay_ms.unwrap_or(DEFAULT_SLEEP_MS));
        }
        if let Some(t) = timeout.filter(|t| busy > *t) {
            if !cancel.sleep(t) {
                return StageOutcome::cancelled(Vec::new(), Vec::new());
            }
            return StageOutcome::timed_out(Vec::new(), b"stage timed out\n".to_vec());
        }
        if !cancel.sleep(busy) {
            return StageOutcome::cancelled(Vec::new(), Vec::new());
        }

        let (rc, stdout) = match behavior {
            "hello" => (0, format!("hello from {}", handle.eid).into_bytes()),
            "aesgcm" => {
                let seed = spec.seed.as_deref().unwrap_or(DEFAULT_AESGCM_SEED);
                let n = spec.bytes.unwrap_or(DEFAULT_AESGCM_BYTES);
                (0, hex::encode(aesgcm_tag(seed.as_bytes(), n)).into_bytes())
            }
            "fail" => {
                let rc = spec.rc.unwrap_or(1);
                (rc, format!("failing with rc {rc}").into_bytes())
            }
            "sleep" => (0, format!("slept {}ms", busy.as_millis()).into_bytes()),
            _ => unreachable!("rejected in prepare"),
        };
        let rc = self.faults.rc_override.unwrap_or(rc);

        let mut extra = BTreeMap::new();
        extra.insert("attestation".into(), "ok".into());
        extra.insert("cid".into(), handle.cid.clone());
        extra.insert("eid".into(), handle.eid.clone());
        StageOutcome {
            rc,
            stdout,
            stderr: Vec::new(),
            evidence: Some(Evidence {
                tee_type: "sim".into(),
                evidence_type: "sim-measurement".into(),
                measurement_hash: measurement(behavior, spec),
                extra,
            }),
            failure: None,
        }
    }

    fn destroy(&self, _handle: &BackendHandle) {}
}
