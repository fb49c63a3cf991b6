// SPDX-License-Identifier: Apache-2.0

//! Artifact (IPR) and state-consistency (SCR) audits over a state
//! directory.

use std::collections::BTreeMap;
use std::fs;

use c4_core::backend::ExecutionLedger;
use c4_core::lifecycle::{project_oci, reduce_termination, terminal_state_for};
use c4_core::protocol::{verify_response, ResponseStatus, StageResponse};
use c4_core::store::{cmp_eid, StageStatus, StateDir};
use serde::{Deserialize, Serialize};

/// Named predicates an IPR audit can flag.
pub const IPR_PREDICATES: [&str; 6] = ["claim", "fresh_eid", "meta", "run_log", "response", "rc_match"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// EID or request the violation is about, or `record`.
    pub subject: String,
    pub predicate: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditResult {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditResult {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }

    /// Distinct predicates that failed.
    pub fn flagged(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.violations.iter().map(|x| x.predicate.as_str()).collect();
        v.sort();
        v.dedup();
        v
    }

    fn flag(&mut self, subject: &str, predicate: &str, detail: impl Into<String>) {
        self.violations.push(Violation {
            subject: subject.into(),
            predicate: predicate.into(),
            detail: detail.into(),
        });
    }
}

/// Per-request artifact checks. `expected` lists request ids that must
/// each have exactly one EID.
pub fn audit_artifacts(sd: &StateDir, expected: &[String]) -> AuditResult {
    let mut res = AuditResult::default();
    let eids = match sd.list_eids() {
        Ok(e) => e,
        Err(e) => {
            res.flag("enclaves", "fresh_eid", e.to_string());
            return res;
        }
    };
    let session = sd.load_session().ok();
    let mut by_request: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for eid in &eids {
        res.checked += 1;
        let claim = match sd.read_claim(eid) {
            Ok(Some(c)) => c,
            Ok(None) => {
                res.flag(eid, "claim", "claim.json missing");
                continue;
            }
            Err(e) => {
                res.flag(eid, "claim", e.to_string());
                continue;
            }
        };
        by_request.entry(claim.request_id.clone()).or_default().push(eid.clone());

        let meta = match sd.read_stage_meta(eid) {
            Ok(Some(m)) => {
                if m.eid != *eid || m.cid != sd.cid() || m.request_id != claim.request_id {
                    res.flag(eid, "meta", "meta.json does not describe this invocation");
                    None
                } else {
                    Some(m)
                }
            }
            Ok(None) => {
                res.flag(eid, "meta", "meta.json missing");
                None
            }
            Err(e) => {
                res.flag(eid, "meta", e.to_string());
                None
            }
        };

        let log = match sd.read_run_log(eid) {
            Ok(Some(l)) => Some(l),
            Ok(None) => {
                res.flag(eid, "run_log", "run.log missing");
                None
            }
            Err(e) => {
                res.flag(eid, "run_log", e.to_string());
                None
            }
        };

        let resp = match fs::read(sd.response_path(&claim.request_id)) {
            Ok(b) => match StageResponse::from_json(&b) {
                Ok(r) => {
                    let tag_ok = session
                        .as_ref()
                        .is_some_and(|s| verify_response(&r, &s.sk, |id| id == claim.request_id));
                    if tag_ok {
                        Some(r)
                    } else {
                        res.flag(eid, "response", "response tag does not verify");
                        None
                    }
                }
                Err(e) => {
                    res.flag(eid, "response", e.to_string());
                    None
                }
            },
            Err(_) => {
                res.flag(eid, "response", "response missing");
                None
            }
        };

        if let (Some(m), Some(r)) = (&meta, &resp) {
            let status_ok = match m.status {
                StageStatus::Completed => r.status == ResponseStatus::Completed && m.rc == 0,
                StageStatus::Failed => r.status == ResponseStatus::Failed,
            };
            if r.rc != m.rc || r.eid.as_deref() != Some(eid.as_str()) || !status_ok {
                res.flag(eid, "rc_match", format!("meta rc {} vs response rc {}", m.rc, r.rc));
            }
            if let Some(l) = &log {
                if *l != r.output || l.len() as u64 != m.output_len {
                    res.flag(eid, "rc_match", "response output differs from run.log");
                }
            }
        }
    }

    for (rid, list) in &by_request {
        if list.len() > 1 {
            res.flag(rid, "fresh_eid", format!("claimed by {}", list.join(",")));
        }
    }
    for rid in expected {
        if !by_request.contains_key(rid) {
            res.flag(rid, "fresh_eid", "no EID for an issued request");
        }
    }
    // only rejections may be answered without an EID
    if let Ok(dir) = fs::read_dir(sd.responses_dir()) {
        for entry in dir.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(rid) = name.strip_suffix(".resp") else { continue };
            if by_request.contains_key(rid) {
                continue;
            }
            let rejected = fs::read(entry.path())
                .ok()
                .and_then(|b| StageResponse::from_json(&b).ok())
                .is_some_and(|r| r.status == ResponseStatus::Rejected && r.eid.is_none());
            if !rejected {
                res.flag(rid, "response", "response without a claimed EID");
            }
        }
    }
    res
}

/// Checks the state record against the newest stage record and the
/// persisted termination.
pub fn audit_state_consistency(sd: &StateDir) -> AuditResult {
    let mut res = AuditResult {
        checked: 1,
        ..Default::default()
    };
    let rec = match sd.read_record() {
        Ok(r) => r,
        Err(e) => {
            res.flag("record", "record", e.to_string());
            return res;
        }
    };
    if rec.oci_status != project_oci(rec.state) {
        res.flag("record", "oci_status", format!("{:?} for {:?}", rec.oci_status, rec.state));
    }
    if rec.ready() && rec.state != c4_core::lifecycle::LifecycleState::Running {
        res.flag("record", "ready", "ready outside Running");
    }

    let newest = sd
        .list_eids()
        .unwrap_or_default()
        .into_iter()
        .filter_map(|e| sd.read_stage_meta(&e).ok().flatten())
        .max_by(|a, b| cmp_eid(&a.eid, &b.eid));
    match newest {
        Some(m) => {
            if rec.last_eid.as_deref() != Some(m.eid.as_str())
                || rec.last_stage.as_deref() != Some(m.stage.as_str())
                || rec.last_rc != Some(m.rc)
            {
                res.flag(
                    "record",
                    "summary",
                    format!(
                        "record {:?}/{:?}/{:?} vs newest {}/{}/{}",
                        rec.last_eid, rec.last_stage, rec.last_rc, m.eid, m.stage, m.rc
                    ),
                );
            }
        }
        None => {
            if rec.last_eid.is_some() {
                res.flag("record", "summary", "last_eid without any stage record");
            }
        }
    }

    if rec.state.is_terminal() {
        match sd.read_termination() {
            Ok(Some(t)) => {
                let c_untrusted = c4_core::bundle::Bundle::load(&sd.bundle_dir())
                    .map(|b| b.config.c4.c_untrusted)
                    .unwrap_or(c4_core::lifecycle::DEFAULT_C_UNTRUSTED);
                match reduce_termination(&t.events, c_untrusted) {
                    Ok((code, dom)) => {
                        if code != t.exit_code || dom != t.dominant {
                            res.flag("record", "termination", "persisted reduction differs");
                        }
                        if terminal_state_for(&dom) != rec.state || Some(code) != rec.exit_code {
                            res.flag(
                                "record",
                                "termination",
                                format!("record {:?}/{:?} vs events", rec.state, rec.exit_code),
                            );
                        }
                    }
                    Err(e) => res.flag("record", "termination", e.to_string()),
                }
            }
            Ok(None) => res.flag("record", "termination", "terminal without termination.json"),
            Err(e) => res.flag("record", "termination", e.to_string()),
        }
    } else if rec.exit_code.is_some() {
        res.flag("record", "termination", "exit code on a live instance");
    }
    res
}

/// Execution-count check for one instance: every request that got an EID
/// and reached the backend ran exactly once, nothing else ran.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactlyOnce {
    pub accepted: usize,
    pub executions: usize,
    pub duplicated: Vec<String>,
    pub unexpected: Vec<String>,
    pub missing: Vec<String>,
    /// Executions whose EID does not belong to the request, or EIDs that
    /// ran more than once.
    pub mismatched: Vec<String>,
}

impl ExactlyOnce {
    pub fn pass(&self) -> bool {
        self.duplicated.is_empty()
            && self.unexpected.is_empty()
            && self.missing.is_empty()
            && self.mismatched.is_empty()
    }
}

pub fn audit_exactly_once(sd: &StateDir, ledger: &std::path::Path) -> ExactlyOnce {
    let mut out = ExactlyOnce::default();
    let entries = ExecutionLedger::read_entries(ledger).unwrap_or_default();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_eid: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.cid == sd.cid()) {
        *counts.entry(e.request_id.clone()).or_default() += 1;
        *by_eid.entry(e.eid.clone()).or_default() += 1;
        out.executions += 1;
        let owner = sd.read_claim(&e.eid).ok().flatten().map(|c| c.request_id);
        if owner.as_deref() != Some(e.request_id.as_str()) {
            out.mismatched.push(format!("{} ran {}", e.eid, e.request_id));
        }
    }
    for (eid, n) in by_eid {
        if n > 1 {
            out.mismatched.push(format!("{eid} ran {n} times"));
        }
    }
    let mut claimed = BTreeMap::new();
    for eid in sd.list_eids().unwrap_or_default() {
        if let Ok(Some(c)) = sd.read_claim(&eid) {
            let meta = sd.read_stage_meta(&eid).ok().flatten();
            // stages refused before execution never reach the backend
            let ran = meta.as_ref().map_or(true, |m| {
                !matches!(m.failure.as_deref(), Some("stage_not_found" | "prepare_failed" | "cancelled"))
                    || counts.contains_key(&c.request_id)
            });
            claimed.insert(c.request_id, ran);
        }
    }
    out.accepted = claimed.len();
    for (rid, n) in &counts {
        if *n > 1 {
            out.duplicated.push(rid.clone());
        }
        if !claimed.contains_key(rid) {
            out.unexpected.push(rid.clone());
        }
    }
    for (rid, ran) in &claimed {
        if *ran && !counts.contains_key(rid) {
            out.missing.push(rid.clone());
        }
    }
    out
}
