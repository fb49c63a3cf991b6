// SPDX-License-Identifier: Apache-2.0

//! The serve pipeline: claim, validate, execute and answer stage requests
//! spooled by the anchor, and recover from crashes mid-pipeline.
//!
//! Claiming, validation and the acceptance commit happen under the session
//! lock in `(epoch, seq)` order, so the ordering watermark only ever moves
//! forward over requests that were actually accepted. Execution runs outside
//! the lock and may proceed in parallel.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{
    Backend, CancelToken, ExecRequest, ExecutionLedger, StageOutcome, RC_RECOVERY_AMBIGUOUS,
};
use crate::bundle::Bundle;
use crate::crash::{CrashInjector, CrashPoint};
use crate::lifecycle::{
    default_trust_policy, evaluate_observability, EventSource, HealthEvidence,
    ObservabilityEvidence, TeeEvidence, TerminationEvent, TerminationReason, TrustFlag,
};
use crate::process::send_signal;
use crate::protocol::{
    build_response, validate_request, RejectReason, ResponseStatus, StageRequest,
};
use crate::store::{
    cmp_eid, observation_time, unix_millis, ClaimRecord, StageMeta, StageStatus, StateDir,
    StoreError, META_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("serve or recovery already running for {0}")]
    Busy(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ServeError {
    pub fn is_crash(&self) -> bool {
        matches!(self, ServeError::Store(StoreError::Crashed(_)))
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> ServeError + '_ {
    move |source| ServeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Result<T, E = ServeError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// A failed stage terminates the whole instance.
    pub fail_fast: bool,
    pub poll: Duration,
    pub workers: usize,
    /// Return once the spool is empty instead of waiting for more work.
    pub until_idle: bool,
    pub crash: CrashInjector,
    pub ledger: Arc<ExecutionLedger>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            fail_fast: true,
            poll: Duration::from_millis(50),
            workers: 1,
            until_idle: false,
            crash: CrashInjector::none(),
            ledger: Arc::new(ExecutionLedger::new(None)),
        }
    }
}

/// A request that passed the Accept predicate and was committed to the
/// session.
#[derive(Debug, Clone)]
pub struct Accepted {
    pub claimed: PathBuf,
    pub request: StageRequest,
}

#[derive(Debug)]
pub enum Admission {
    Accepted(Accepted),
    Rejected {
        file: String,
        reason: RejectReason,
    },
    Empty,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ServeStats {
    pub accepted: u64,
    pub rejected: u64,
    pub executed: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryReport {
    pub responses_regenerated: u64,
    pub ambiguous: u64,
    pub resumed: u64,
    pub requeued: u64,
    pub cleaned: u64,
    pub orphans_removed: u64,
}

/// Sort key for spooled request files: `(epoch, seq)` parsed from the
/// `<epoch>-<seq>-<suffix>.req` name; unparseable names sort last.
fn spool_key(name: &str) -> (u64, u64, u64, String) {
    let stem = name.strip_suffix(".req").unwrap_or(name);
    let mut it = stem.splitn(3, '-');
    let parsed = (|| {
        let e = it.next()?.parse().ok()?;
        let s = it.next()?.parse().ok()?;
        Some((e, s))
    })();
    match parsed {
        Some((e, s)) => (0, e, s, name.to_string()),
        None => (1, 0, 0, name.to_string()),
    }
}

fn list_spool(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io_at(dir))?
        .flatten()
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort_by_key(|n| spool_key(n));
    Ok(names)
}

pub struct Server {
    sd: StateDir,
    backend: Arc<dyn Backend>,
    cfg: ServeConfig,
    cancel: CancelToken,
}

impl Server {
    pub fn new(sd: StateDir, backend: Arc<dyn Backend>, cfg: ServeConfig) -> Self {
        Self {
            sd,
            backend,
            cfg,
            cancel: CancelToken::new(),
        }
    }

    pub fn statedir(&self) -> &StateDir {
        &self.sd
    }

    fn c_untrusted(&self) -> u8 {
        Bundle::load(&self.sd.bundle_dir())
            .map(|b| b.config.c4.c_untrusted)
            .unwrap_or(crate::lifecycle::DEFAULT_C_UNTRUSTED)
    }

    /// True once the instance is terminal or a kill was requested; running
    /// stages are then cancelled.
    fn should_stop(&self) -> bool {
        if self.sd.kill_requested_path().exists() {
            return true;
        }
        match self.sd.read_record() {
            Ok(r) => r.state.is_terminal(),
            Err(_) => true,
        }
    }

    /// Claims the oldest pending request and decides on it. On acceptance
    /// the session (replay sets and watermark) is committed before
    /// returning.
    pub fn admit_next(&self) -> Result<Admission> {
        let _g = self.sd.lock_session()?;
        let reqdir = self.sd.requests_dir();
        let Some(name) = list_spool(&reqdir)?.into_iter().next() else {
            return Ok(Admission::Empty);
        };
        let claimed = self.sd.claimed_dir().join(&name);
        fs::rename(reqdir.join(&name), &claimed).map_err(io_at(&claimed))?;
        self.cfg.crash.check(CrashPoint::AfterClaim).map_err(StoreError::from)?;

        let mut session = self.sd.load_session()?;
        let bytes = fs::read(&claimed).map_err(io_at(&claimed))?;
        let req = match StageRequest::from_json(&bytes) {
            Ok(r) if name == format!("{}.req", r.request_id) => r,
            _ => {
                self.reject(&claimed, &name, None, RejectReason::Malformed)?;
                return Ok(Admission::Rejected {
                    file: name,
                    reason: RejectReason::Malformed,
                });
            }
        };
        if let Err(reason) = validate_request(&req, &session, self.sd.cid(), self.sd.dir()) {
            let authentic = req.cid == self.sd.cid() && req.mac_valid(&session.sk);
            self.reject(&claimed, &name, Some((&req, authentic, &session.sk)), reason)?;
            return Ok(Admission::Rejected { file: name, reason });
        }
        session.commit_accept(&req);
        self.sd.save_session(&session)?;
        self.cfg.crash.check(CrashPoint::AfterAccept).map_err(StoreError::from)?;
        Ok(Admission::Accepted(Accepted {
            claimed,
            request: req,
        }))
    }

    /// Logs the rejection and, if the request verified under the session
    /// key, answers it with an authenticated rejection so the anchor does
    /// not wait forever. No EID is allocated and the session is untouched.
    fn reject(
        &self,
        claimed: &Path,
        file: &str,
        req: Option<(&StageRequest, bool, &crate::protocol::SessionKey)>,
        reason: RejectReason,
    ) -> Result<()> {
        log::info!("{}: rejected {file}: {reason}", self.sd.cid());
        self.sd
            .append_reject(file, req.map(|r| r.0.request_id.as_str()), reason.as_str())?;
        if let Some((req, true, sk)) = req {
            if crate::protocol::is_safe_id(&req.request_id)
                && !self.sd.response_exists(&req.request_id)
            {
                let resp = build_response(
                    sk,
                    &req.request_id,
                    None,
                    0,
                    ResponseStatus::Rejected,
                    b"",
                    Some(reason),
                )
                .expect("rejections carry no eid");
                match self.sd.spool_response(&resp) {
                    Ok(()) | Err(StoreError::ResponseExists(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        fs::remove_file(claimed).map_err(io_at(claimed))
    }

    /// Runs an accepted request to completion: EID, prepare, execute,
    /// records, state summary, response. `eid` resumes a claim made before
    /// a crash.
    pub fn process_accepted(&self, acc: &Accepted, eid: Option<String>) -> Result<()> {
        let req = &acc.request;
        let eid = match eid {
            Some(e) => e,
            None => {
                let e = self.sd.allocate_eid()?;
                self.cfg.crash.check(CrashPoint::AfterEidAlloc).map_err(StoreError::from)?;
                e
            }
        };
        self.sd.write_claim(
            &eid,
            &ClaimRecord {
                request_id: req.request_id.clone(),
                claimed_file: acc
                    .claimed
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                stage: req.stage.clone(),
                epoch: req.epoch,
                seq: req.seq,
            },
        )?;

        let started = unix_millis();
        let outcome = match self.backend.prepare(self.sd.cid(), &eid, &req.stage) {
            Err(e) => StageOutcome {
                rc: e.rc(),
                stdout: Vec::new(),
                stderr: e.to_string().into_bytes(),
                evidence: None,
                failure: Some(e.failure().into()),
            },
            Ok(handle) => {
                self.cfg.crash.check(CrashPoint::AfterPrepare).map_err(StoreError::from)?;
                let out = if self.cancel.is_cancelled() || self.should_stop() {
                    StageOutcome::cancelled(Vec::new(), Vec::new())
                } else {
                    self.sd.mark_executing(&eid)?;
                    if let Err(e) = self.cfg.ledger.record(self.sd.cid(), &eid, &req.request_id) {
                        log::warn!("execution ledger: {e}");
                    }
                    self.backend.execute(
                        &handle,
                        &ExecRequest {
                            request_id: &req.request_id,
                            payload: &req.payload,
                        },
                        &self.cancel,
                    )
                };
                self.backend.destroy(&handle);
                out
            }
        };
        self.cfg.crash.check(CrashPoint::AfterExecute).map_err(StoreError::from)?;
        self.finish(acc, &eid, outcome, started)
    }

    /// Everything after execution: idempotent up to the first write that
    /// already happened, which is what recovery relies on.
    fn finish(&self, acc: &Accepted, eid: &str, outcome: StageOutcome, started: u64) -> Result<()> {
        let req = &acc.request;
        self.sd.write_run_log(eid, &outcome.stdout, &outcome.stderr)?;
        self.cfg.crash.check(CrashPoint::AfterRunLog).map_err(StoreError::from)?;

        let meta = StageMeta {
            schema_version: META_SCHEMA_VERSION,
            cid: self.sd.cid().to_string(),
            eid: eid.to_string(),
            request_id: req.request_id.clone(),
            stage: req.stage.clone(),
            epoch: req.epoch,
            seq: req.seq,
            rc: outcome.rc,
            status: if outcome.rc == 0 {
                StageStatus::Completed
            } else {
                StageStatus::Failed
            },
            failure: outcome.failure.clone(),
            backend_id: self.backend.id().to_string(),
            evidence: outcome.evidence.clone(),
            started_at_ms: started,
            finished_at_ms: unix_millis(),
            output_len: outcome.stdout.len() as u64,
        };
        self.sd.write_stage_meta(&meta)?;
        self.cfg.crash.check(CrashPoint::AfterMeta).map_err(StoreError::from)?;
        self.publish(acc, &meta, &outcome.stdout)
    }

    /// Summary update, response and cleanup for a record already on disk.
    fn publish(&self, acc: &Accepted, meta: &StageMeta, output: &[u8]) -> Result<()> {
        self.update_summary(meta)?;
        self.cfg.crash.check(CrashPoint::AfterSummary).map_err(StoreError::from)?;

        let session = self.sd.load_session()?;
        let status = match meta.status {
            StageStatus::Completed => ResponseStatus::Completed,
            StageStatus::Failed => ResponseStatus::Failed,
        };
        let resp = build_response(
            &session.sk,
            &meta.request_id,
            Some(&meta.eid),
            meta.rc,
            status,
            output,
            None,
        )
        .expect("non-rejected response");
        match self.sd.spool_response(&resp) {
            Ok(()) | Err(StoreError::ResponseExists(_)) => {}
            Err(e) => return Err(e.into()),
        }
        self.cfg.crash.check(CrashPoint::AfterResponse).map_err(StoreError::from)?;
        match fs::remove_file(&acc.claimed) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_at(&acc.claimed)(e)),
        }
    }

    /// Folds a finished record into `state.json`. The `last_*` fields only
    /// move forward in EID order; a failed or untrusted stage terminates
    /// the instance when policy says so.
    fn update_summary(&self, meta: &StageMeta) -> Result<()> {
        let in_flight = self.sd.count_in_flight()?;
        let cid = self.sd.cid().to_string();
        let (rec, newest) = self.sd.modify_record(|r| {
            let newest = r
                .last_eid
                .as_deref()
                .map_or(true, |last| cmp_eid(&meta.eid, last) != std::cmp::Ordering::Less);
            if newest {
                r.last_eid = Some(meta.eid.clone());
                r.last_stage = Some(meta.stage.clone());
                r.last_rc = Some(meta.rc);
                let trust = meta
                    .evidence
                    .as_ref()
                    .map(|e| e.trust_inputs(&cid, &meta.eid))
                    .unwrap_or_default();
                let prepared = !matches!(
                    meta.failure.as_deref(),
                    Some("prepare_failed" | "stage_not_found" | "recovery_ambiguous")
                );
                let ev = ObservabilityEvidence {
                    trust,
                    health: HealthEvidence {
                        dependencies_ok: Some(prepared),
                        resources_ok: Some(true),
                        performance_ok: Some(meta.failure.as_deref() != Some("timeout")),
                    },
                    tee: TeeEvidence::default(),
                };
                let (t, h, _) = evaluate_observability(&ev, default_trust_policy);
                r.trust_flag = t;
                r.health_flag = h;
                r.prepared_t = prepared && meta.evidence.is_some();
            }
            let last_rc = r.last_rc.unwrap_or(0);
            let (_, _, phase) = evaluate_observability(
                &ObservabilityEvidence {
                    tee: TeeEvidence {
                        in_flight,
                        timeouts: u32::from(last_rc == crate::backend::RC_TIMEOUT),
                        exit_failed: r.last_rc.map(|rc| rc != 0),
                    },
                    ..Default::default()
                },
                default_trust_policy,
            );
            r.tee_phase = phase;
            Ok(newest)
        })?;

        if rec.state.is_terminal() {
            return Ok(());
        }
        let cancelled = meta.failure.as_deref() == Some("cancelled");
        let event = if newest && rec.require_conf && rec.trust_flag == TrustFlag::Untrusted {
            Some(TerminationEvent::new(
                EventSource::Tee,
                0,
                TerminationReason::Untrusted,
                observation_time(),
            ))
        } else if self.cfg.fail_fast && meta.rc != 0 && !cancelled {
            let code = u8::try_from(meta.rc).ok().filter(|c| *c != 0).unwrap_or(255);
            Some(TerminationEvent::new(
                EventSource::Tee,
                code,
                TerminationReason::Error,
                observation_time(),
            ))
        } else {
            None
        };
        if let Some(Ok(ev)) = event {
            let (rec, applied) = self.sd.finalize_termination(&[ev], self.c_untrusted())?;
            if applied {
                log::info!("{}: stage {} failed, instance {:?}", cid, meta.eid, rec.state);
                self.cancel.cancel();
                if let Some(pid) = rec.anchor_pid {
                    send_signal(pid, libc::SIGTERM);
                }
            }
        }
        Ok(())
    }

    /// Serves until the instance is terminal (or, with `until_idle`, until
    /// the spool is empty).
    pub fn serve(&self) -> Result<ServeStats> {
        let _serve = self.sd.lock_serve_shared()?;
        let stats = Mutex::new(ServeStats::default());
        let stop = AtomicBool::new(false);
        let first_err: Mutex<Option<ServeError>> = Mutex::new(None);

        thread::scope(|s| {
            s.spawn(|| {
                while !stop.load(Ordering::SeqCst) {
                    if self.should_stop() {
                        self.cancel.cancel();
                        if !self.cfg.until_idle {
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                    thread::sleep(self.cfg.poll);
                }
            });
            let workers: Vec<_> = (0..self.cfg.workers.max(1))
                .map(|_| {
                    s.spawn(|| {
                        let r = self.worker(&stop, &stats);
                        if let Err(e) = r {
                            stop.store(true, Ordering::SeqCst);
                            self.cancel.cancel();
                            first_err.lock().unwrap().get_or_insert(e);
                        }
                    })
                })
                .collect();
            for w in workers {
                let _ = w.join();
            }
            stop.store(true, Ordering::SeqCst);
        });
        if let Some(e) = first_err.into_inner().unwrap() {
            return Err(e);
        }
        Ok(stats.into_inner().unwrap())
    }

    fn worker(&self, stop: &AtomicBool, stats: &Mutex<ServeStats>) -> Result<()> {
        while !stop.load(Ordering::SeqCst) {
            match self.admit_next()? {
                Admission::Accepted(acc) => {
                    stats.lock().unwrap().accepted += 1;
                    self.process_accepted(&acc, None)?;
                    stats.lock().unwrap().executed += 1;
                }
                Admission::Rejected { .. } => stats.lock().unwrap().rejected += 1,
                Admission::Empty => {
                    if self.cfg.until_idle {
                        return Ok(());
                    }
                    thread::sleep(self.cfg.poll);
                }
            }
        }
        Ok(())
    }

    /// Repairs the spool after a crash. Requires that no server is running.
    ///
    /// Finished stages get their response regenerated from the stored
    /// record; a stage that may have started but left no record is
    /// finalized as failed rather than run a second time; accepted requests
    /// that never reached execution are resumed; unaccepted ones go back to
    /// the spool.
    pub fn recover(&self) -> Result<RecoveryReport> {
        let Some(_excl) = self.sd.try_lock_serve_exclusive()? else {
            return Err(ServeError::Busy(self.sd.cid().to_string()));
        };
        let mut report = RecoveryReport::default();

        let mut by_request: HashMap<String, String> = HashMap::new();
        let mut orphans = Vec::new();
        for eid in self.sd.list_eids()? {
            match self.sd.read_claim(&eid) {
                Ok(Some(c)) => {
                    by_request.insert(c.request_id, eid);
                }
                Ok(None) | Err(StoreError::Corrupt { .. }) => orphans.push(eid),
                Err(e) => return Err(e.into()),
            }
        }

        let claimed_dir = self.sd.claimed_dir();
        for name in list_spool(&claimed_dir)? {
            let path = claimed_dir.join(&name);
            let req = match fs::read(&path)
                .ok()
                .and_then(|b| StageRequest::from_json(&b).ok())
            {
                Some(r) => r,
                None => {
                    self.requeue(&path, &name)?;
                    report.requeued += 1;
                    continue;
                }
            };
            let acc = Accepted {
                claimed: path.clone(),
                request: req.clone(),
            };
            if self.sd.response_exists(&req.request_id) {
                fs::remove_file(&path).map_err(io_at(&path))?;
                report.cleaned += 1;
                continue;
            }
            match by_request.get(&req.request_id) {
                Some(eid) => match self.sd.read_stage_meta(eid) {
                    Ok(Some(meta)) => {
                        let output = self.sd.read_run_log(eid)?.unwrap_or_default();
                        self.publish(&acc, &meta, &output)?;
                        report.responses_regenerated += 1;
                    }
                    Ok(None) if !self.sd.is_executing_marked(eid) => {
                        self.process_accepted(&acc, Some(eid.clone()))?;
                        report.resumed += 1;
                    }
                    Ok(None) | Err(StoreError::Corrupt { .. }) => {
                        self.finalize_ambiguous(&acc, eid)?;
                        report.ambiguous += 1;
                    }
                    Err(e) => return Err(e.into()),
                },
                None => {
                    let session = self.sd.load_session()?;
                    if session.epoch == req.epoch
                        && session.seen_request_ids.contains(&req.request_id)
                    {
                        self.process_accepted(&acc, None)?;
                        report.resumed += 1;
                    } else {
                        self.requeue(&path, &name)?;
                        report.requeued += 1;
                    }
                }
            }
        }

        for eid in orphans {
            if self.sd.read_stage_meta(&eid).ok().flatten().is_none() {
                self.sd.remove_eid_dir(&eid)?;
                report.orphans_removed += 1;
            }
        }
        self.refresh_phase()?;
        Ok(report)
    }

    fn requeue(&self, path: &Path, name: &str) -> Result<()> {
        let back = self.sd.requests_dir().join(name);
        fs::rename(path, &back).map_err(io_at(&back))
    }

    /// The stage may or may not have run; never run it again.
    fn finalize_ambiguous(&self, acc: &Accepted, eid: &str) -> Result<()> {
        let req = &acc.request;
        if self.sd.read_run_log(eid)?.is_none() {
            self.sd.write_run_log(eid, b"", b"")?;
        }
        let output = self.sd.read_run_log(eid)?.unwrap_or_default();
        let meta = StageMeta {
            schema_version: META_SCHEMA_VERSION,
            cid: self.sd.cid().to_string(),
            eid: eid.to_string(),
            request_id: req.request_id.clone(),
            stage: req.stage.clone(),
            epoch: req.epoch,
            seq: req.seq,
            rc: RC_RECOVERY_AMBIGUOUS,
            status: StageStatus::Failed,
            failure: Some("recovery_ambiguous".into()),
            backend_id: self.backend.id().to_string(),
            evidence: None,
            started_at_ms: unix_millis(),
            finished_at_ms: unix_millis(),
            output_len: output.len() as u64,
        };
        let meta_path = self.sd.eid_dir(eid).join("meta.json");
        if meta_path.exists() {
            // unreadable record: replace it, the original content is lost anyway
            let bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
            crate::fsutil::atomic_write(&meta_path, &bytes).map_err(io_at(&meta_path))?;
        } else {
            self.sd.write_stage_meta(&meta)?;
        }
        self.publish(acc, &meta, &output)
    }

    fn refresh_phase(&self) -> Result<()> {
        let in_flight = self.sd.count_in_flight()?;
        self.sd.modify_record(|r| {
            let (_, _, phase) = evaluate_observability(
                &ObservabilityEvidence {
                    tee: TeeEvidence {
                        in_flight,
                        timeouts: u32::from(r.last_rc == Some(crate::backend::RC_TIMEOUT)),
                        exit_failed: r.last_rc.map(|rc| rc != 0),
                    },
                    ..Default::default()
                },
                default_trust_policy,
            );
            r.tee_phase = phase;
            Ok(())
        })?;
        Ok(())
    }
}
