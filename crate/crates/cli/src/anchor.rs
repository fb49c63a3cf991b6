// SPDX-License-Identifier: Apache-2.0

//! Reference anchor: issues stage requests over the file spool and waits for
//! verified responses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use c4_core::protocol::{
    verify_response, ResponseStatus, SessionState, StageResponse, RESPONSES_DIR,
};
use serde::{Deserialize, Serialize};

pub const EXIT_STAGE_FAILED: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 2;
pub const EXIT_TIMEOUT: i32 = 3;
pub const EXIT_SETUP: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    /// Stage names, cycled until `count` requests were issued.
    pub stages: Vec<String>,
    /// Defaults to `stages.len()`.
    #[serde(default)]
    pub count: Option<usize>,
    /// Maximum outstanding requests.
    #[serde(default = "one")]
    pub concurrency: usize,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub payload: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn one() -> usize {
    1
}

fn default_timeout() -> u64 {
    60_000
}

impl Workload {
    pub fn count(&self) -> usize {
        self.count.unwrap_or(self.stages.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub k: usize,
    pub elapsed_s: f64,
    pub completed: usize,
    pub failed: usize,
    /// Request ids in issue order.
    pub request_ids: Vec<String>,
}

#[derive(Debug)]
pub struct AnchorOutcome {
    pub report: AnchorReport,
    pub exit_code: i32,
    pub error: Option<String>,
}

fn spool(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dir.join(name))
}

/// Runs `w` against the state directory `statedir` using the session at
/// `session_path`.
pub fn run(statedir: &Path, session_path: &Path, w: &Workload) -> AnchorOutcome {
    let k = w.count();
    let mut report = AnchorReport {
        k,
        elapsed_s: 0.0,
        completed: 0,
        failed: 0,
        request_ids: Vec::with_capacity(k),
    };
    let fail = |report: AnchorReport, code: i32, msg: String| AnchorOutcome {
        report,
        exit_code: code,
        error: Some(msg),
    };
    if w.stages.is_empty() && k > 0 {
        return fail(report, EXIT_SETUP, "no stages".into());
    }
    let mut session = match fs::read(session_path)
        .map_err(|e| e.to_string())
        .and_then(|b| SessionState::from_json(&b).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => return fail(report, EXIT_SETUP, format!("session: {e}")),
    };
    let requests = statedir.join("requests");
    let responses = statedir.join(RESPONSES_DIR);
    let poll = Duration::from_millis(2);
    let started = Instant::now();
    let deadline = started + Duration::from_millis(w.timeout_ms);
    let mut outstanding: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut issued = 0;

    while issued < k || !outstanding.is_empty() {
        while issued < k && outstanding.len() < w.concurrency.max(1) {
            let stage = &w.stages[issued % w.stages.len()];
            let req = session.build_request(stage, w.payload.as_bytes());
            let name = format!("{}.req", req.request_id);
            if let Err(e) = spool(&requests, &name, &req.to_json()) {
                return fail(report, EXIT_SETUP, format!("spool {name}: {e}"));
            }
            let path = responses.join(format!("{}.resp", req.request_id));
            report.request_ids.push(req.request_id.clone());
            outstanding.insert(req.request_id, path);
            issued += 1;
            if w.delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(w.delay_ms));
            }
        }

        let mut done = Vec::new();
        for (id, path) in &outstanding {
            let Ok(bytes) = fs::read(path) else { continue };
            let resp = match StageResponse::from_json(&bytes) {
                Ok(r) => r,
                Err(e) => return fail(report, EXIT_VERIFY_FAILED, format!("{id}: {e}")),
            };
            if resp.request_id != *id || !verify_response(&resp, &session.sk, |r| r == id) {
                return fail(report, EXIT_VERIFY_FAILED, format!("{id}: bad response tag"));
            }
            if resp.status == ResponseStatus::Completed && resp.rc == 0 {
                report.completed += 1;
            } else {
                report.failed += 1;
                report.elapsed_s = started.elapsed().as_secs_f64();
                return fail(
                    report,
                    EXIT_STAGE_FAILED,
                    format!("{id}: {:?} rc={}", resp.status, resp.rc),
                );
            }
            done.push(id.clone());
        }
        for id in done {
            outstanding.remove(&id);
        }
        if outstanding.is_empty() && issued == k {
            break;
        }
        if Instant::now() >= deadline {
            report.elapsed_s = started.elapsed().as_secs_f64();
            return fail(report, EXIT_TIMEOUT, format!("{} responses missing", outstanding.len()));
        }
        std::thread::sleep(poll);
    }
    report.elapsed_s = started.elapsed().as_secs_f64();
    AnchorOutcome {
        report,
        exit_code: 0,
        error: None,
    }
}

/// Extracts the last report line from anchor output.
pub fn parse_report(out: &str) -> Option<AnchorReport> {
    out.lines()
        .rev()
        .find_map(|l| serde_json::from_str(l.trim()).ok())
}
