// SPDX-License-Identifier: Apache-2.0

//! Persistent per-instance state directory.
//!
//! Layout under `<root>/<cid>/`:
//!
//! ```text
//! state.json            authoritative lifecycle record (CAS on `ver`)
//! session.json          session key, epoch, replay sets, seq watermark
//! termination.json      reduced termination outcome
//! requests/             host spool, claimed/ holds in-progress requests
//! responses/            write-once authenticated responses
//! enclaves/<EID>/       claim.json, executing, run.log, stderr.log, meta.json
//! locks/                flock files
//! bundle/               private copy of the bundle
//! anchor.out eid.seq rejects.log anchor.pid monitor.pid anchor.exit kill.requested
//! ```

use std::cmp::Ordering;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Evidence;
use crate::bundle::Bundle;
use crate::crash::{CrashInjector, CrashPoint, Crashed};
use crate::fsutil::{self, LockGuard};
use crate::lifecycle::{
    project_oci, reduce_termination, terminal_state_for, validate_transition, HealthFlag,
    LifecycleState, OciStatus, TeePhase, TerminationEvent, TrustFlag,
};
use crate::process::pid_alive;
use crate::protocol::{is_safe_id, SessionState, StageResponse};

pub const STATE_SCHEMA_VERSION: u32 = 1;
pub const META_SCHEMA_VERSION: u32 = 1;

const COMPLETE_MARKER: &str = ".complete";
const EXECUTING_MARKER: &str = "executing";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no such instance: {0}")]
    NotFound(String),
    #[error("instance already exists: {0}")]
    Exists(String),
    #[error("invalid instance id {0:?}")]
    BadCid(String),
    #[error("corrupt {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("version conflict: expected {expected}, found {found}")]
    Conflict { expected: u64, found: u64 },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition {
        from: LifecycleState,
        to: LifecycleState,
    },
    #[error("response for {0} already exists")]
    ResponseExists(String),
    #[error("stage record for {0} already exists")]
    RecordExists(String),
    #[error(transparent)]
    Crashed(#[from] Crashed),
    #[error("bundle: {0}")]
    Bundle(#[from] crate::bundle::BundleError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Strictly increasing timestamps within the process, used for
/// `observed_at` so that events seen later never tie with earlier ones.
pub fn observation_time() -> u64 {
    static LAST: AtomicU64 = AtomicU64::new(0);
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let mut prev = LAST.load(AtomicOrdering::Relaxed);
    loop {
        let next = now.max(prev + 1);
        match LAST.compare_exchange(prev, next, AtomicOrdering::Relaxed, AtomicOrdering::Relaxed) {
            Ok(_) => return next,
            Err(p) => prev = p,
        }
    }
}

/// The authoritative lifecycle record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub schema_version: u32,
    pub cid: String,
    pub state: LifecycleState,
    pub ver: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<u8>,
    pub oci_status: OciStatus,
    pub trust_flag: TrustFlag,
    pub health_flag: HealthFlag,
    pub tee_phase: TeePhase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_rc: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_eid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_pid: Option<i32>,
    /// Bundle directory given at create; the instance runs from its own copy.
    pub bundle: PathBuf,
    pub require_conf: bool,
    pub prepared_r: bool,
    pub prepared_t: bool,
    pub created_at_ms: u64,
}

impl StateRecord {
    pub fn new_prepared(cid: &str, bundle: PathBuf, require_conf: bool) -> Self {
        Self {
            schema_version: STATE_SCHEMA_VERSION,
            cid: cid.to_string(),
            state: LifecycleState::Prepared,
            ver: 1,
            exit_code: None,
            oci_status: project_oci(LifecycleState::Prepared),
            trust_flag: TrustFlag::Unknown,
            health_flag: HealthFlag::Unknown,
            tee_phase: TeePhase::Idle,
            last_stage: None,
            last_rc: None,
            last_eid: None,
            anchor_pid: None,
            bundle,
            require_conf,
            prepared_r: false,
            prepared_t: false,
            created_at_ms: unix_millis(),
        }
    }

    pub fn ready(&self) -> bool {
        crate::lifecycle::evaluate_readiness(
            self.state,
            self.trust_flag,
            self.prepared_r,
            self.prepared_t,
            self.require_conf,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

/// Per-invocation record, `enclaves/<EID>/meta.json`. Written once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageMeta {
    pub schema_version: u32,
    pub cid: String,
    pub eid: String,
    pub request_id: String,
    pub stage: String,
    pub epoch: u64,
    pub seq: u64,
    pub rc: i32,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Evidence>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub output_len: u64,
}

/// Written before a stage is prepared, so recovery can map an EID back to
/// the request that caused it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub request_id: String,
    pub claimed_file: String,
    pub stage: String,
    pub epoch: u64,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationRecord {
    pub events: Vec<TerminationEvent>,
    pub dominant: TerminationEvent,
    pub exit_code: u8,
    pub state: LifecycleState,
}

pub fn eid_for(n: u64) -> String {
    format!("eid-{n:04}")
}

pub fn eid_number(eid: &str) -> Option<u64> {
    eid.strip_prefix("eid-")?.parse().ok()
}

/// Orders EIDs by allocation number.
pub fn cmp_eid(a: &str, b: &str) -> Ordering {
    eid_number(a).cmp(&eid_number(b))
}

pub fn validate_cid(cid: &str) -> Result<()> {
    if is_safe_id(cid) && cid.len() <= 64 {
        Ok(())
    } else {
        Err(StoreError::BadCid(cid.to_string()))
    }
}

/// Handle on one instance's state directory.
#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
    cid: String,
    dir: PathBuf,
}

impl StateDir {
    /// Opens an existing, fully created instance.
    pub fn open(root: &Path, cid: &str) -> Result<Self> {
        validate_cid(cid)?;
        let sd = Self {
            root: root.to_path_buf(),
            cid: cid.to_string(),
            dir: root.join(cid),
        };
        if !sd.dir.join(COMPLETE_MARKER).exists() {
            return Err(StoreError::NotFound(cid.to_string()));
        }
        Ok(sd)
    }

    pub fn cid(&self) -> &str {
        &self.cid
    }
    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn dir(&self) -> &Path {
        &self.dir
    }
    pub fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }
    pub fn session_path(&self) -> PathBuf {
        self.dir.join("session.json")
    }
    pub fn termination_path(&self) -> PathBuf {
        self.dir.join("termination.json")
    }
    pub fn requests_dir(&self) -> PathBuf {
        self.dir.join("requests")
    }
    pub fn claimed_dir(&self) -> PathBuf {
        self.dir.join("requests").join("claimed")
    }
    pub fn responses_dir(&self) -> PathBuf {
        self.dir.join("responses")
    }
    pub fn response_path(&self, request_id: &str) -> PathBuf {
        self.responses_dir().join(format!("{request_id}.resp"))
    }
    pub fn enclaves_dir(&self) -> PathBuf {
        self.dir.join("enclaves")
    }
    pub fn eid_dir(&self, eid: &str) -> PathBuf {
        self.enclaves_dir().join(eid)
    }
    pub fn bundle_dir(&self) -> PathBuf {
        self.dir.join("bundle")
    }
    pub fn anchor_out_path(&self) -> PathBuf {
        self.dir.join("anchor.out")
    }
    pub fn anchor_pid_path(&self) -> PathBuf {
        self.dir.join("anchor.pid")
    }
    pub fn monitor_pid_path(&self) -> PathBuf {
        self.dir.join("monitor.pid")
    }
    pub fn anchor_exit_path(&self) -> PathBuf {
        self.dir.join("anchor.exit")
    }
    pub fn kill_requested_path(&self) -> PathBuf {
        self.dir.join("kill.requested")
    }
    pub fn rejects_log_path(&self) -> PathBuf {
        self.dir.join("rejects.log")
    }
    fn lock_path(&self, name: &str) -> PathBuf {
        self.dir.join("locks").join(format!("{name}.lock"))
    }

    pub fn lock_state(&self) -> Result<LockGuard> {
        let p = self.lock_path("state");
        LockGuard::exclusive(&p).at(&p)
    }
    pub fn lock_session(&self) -> Result<LockGuard> {
        let p = self.lock_path("session");
        LockGuard::exclusive(&p).at(&p)
    }
    pub fn lock_start(&self) -> Result<LockGuard> {
        let p = self.lock_path("start");
        LockGuard::exclusive(&p).at(&p)
    }
    /// Held shared by every serve instance.
    pub fn lock_serve_shared(&self) -> Result<LockGuard> {
        let p = self.lock_path("serve");
        LockGuard::shared(&p).at(&p)
    }
    /// Exclusive serve lock for recovery; `None` while any server runs.
    pub fn try_lock_serve_exclusive(&self) -> Result<Option<LockGuard>> {
        let p = self.lock_path("serve");
        LockGuard::try_exclusive(&p).at(&p)
    }

    pub fn read_record(&self) -> Result<StateRecord> {
        let p = self.state_path();
        let bytes = match fsutil::read_optional(&p).at(&p)? {
            Some(b) => b,
            None => return Err(StoreError::NotFound(self.cid.clone())),
        };
        let rec: StateRecord = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path: p.clone(),
            msg: e.to_string(),
        })?;
        if rec.schema_version != STATE_SCHEMA_VERSION || rec.cid != self.cid {
            return Err(StoreError::Corrupt {
                path: p,
                msg: "schema version or cid mismatch".into(),
            });
        }
        Ok(rec)
    }

    fn write_record(&self, rec: &StateRecord) -> Result<()> {
        let p = self.state_path();
        let bytes = serde_json::to_vec_pretty(rec).expect("record serializes");
        fsutil::atomic_write(&p, &bytes).at(&p)
    }

    /// Applies `f` to the current record under the state lock.
    ///
    /// `f` may refuse by returning an error, in which case nothing is
    /// written. A mutation that leaves the record unchanged is not written
    /// either. Otherwise the transition is validated, `ver` is bumped and
    /// `oci_status` recomputed.
    pub fn modify_record<T, F>(&self, f: F) -> Result<(StateRecord, T)>
    where
        F: FnOnce(&mut StateRecord) -> Result<T>,
    {
        let _g = self.lock_state()?;
        let old = self.read_record()?;
        let mut new = old.clone();
        let out = f(&mut new)?;
        if new == old {
            return Ok((old, out));
        }
        if !validate_transition(old.state, new.state) {
            return Err(StoreError::IllegalTransition {
                from: old.state,
                to: new.state,
            });
        }
        new.ver = old.ver + 1;
        new.oci_status = project_oci(new.state);
        new.cid = old.cid.clone();
        new.schema_version = STATE_SCHEMA_VERSION;
        self.write_record(&new)?;
        Ok((new, out))
    }

    /// Compare-and-swap on `ver`: applies `f` only if the record is still at
    /// `expected_ver`.
    pub fn update_record<F>(&self, expected_ver: u64, f: F) -> Result<StateRecord>
    where
        F: FnOnce(&mut StateRecord),
    {
        let (rec, ()) = self.modify_record(|r| {
            if r.ver != expected_ver {
                return Err(StoreError::Conflict {
                    expected: expected_ver,
                    found: r.ver,
                });
            }
            f(r);
            Ok(())
        })?;
        Ok(rec)
    }

    /// Reduces `events` and moves the instance to its terminal state. The
    /// first finalization wins; later calls return the record unchanged and
    /// `false`.
    pub fn finalize_termination(
        &self,
        events: &[TerminationEvent],
        c_untrusted: u8,
    ) -> Result<(StateRecord, bool)> {
        self.modify_record(|r| {
            if r.state.is_terminal() {
                return Ok(false);
            }
            let (code, dominant) = reduce_termination(events, c_untrusted).map_err(|e| {
                StoreError::Corrupt {
                    path: self.termination_path(),
                    msg: e.to_string(),
                }
            })?;
            let state = terminal_state_for(&dominant);
            let term = TerminationRecord {
                events: events.to_vec(),
                dominant,
                exit_code: code,
                state,
            };
            let p = self.termination_path();
            let bytes = serde_json::to_vec_pretty(&term).expect("termination serializes");
            fsutil::atomic_write(&p, &bytes).at(&p)?;
            r.state = state;
            r.exit_code = Some(code);
            r.prepared_r = false;
            Ok(true)
        })
    }

    pub fn read_termination(&self) -> Result<Option<TerminationRecord>> {
        let p = self.termination_path();
        match fsutil::read_optional(&p).at(&p)? {
            None => Ok(None),
            Some(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| StoreError::Corrupt {
                    path: p,
                    msg: e.to_string(),
                }),
        }
    }

    pub fn load_session(&self) -> Result<SessionState> {
        let p = self.session_path();
        let bytes = fs::read(&p).at(&p)?;
        SessionState::from_json(&bytes).map_err(|e| StoreError::Corrupt {
            path: p,
            msg: e.to_string(),
        })
    }

    /// Caller must hold the session lock.
    pub fn save_session(&self, session: &SessionState) -> Result<()> {
        let p = self.session_path();
        fsutil::atomic_write(&p, &session.to_json()).at(&p)
    }

    /// Allocates the next EID and creates its directory.
    ///
    /// The counter is persisted before the directory exists, so a crash can
    /// leave a gap but never hands out the same EID twice.
    pub fn allocate_eid(&self) -> Result<String> {
        let lp = self.lock_path("eid");
        let _g = LockGuard::exclusive(&lp).at(&lp)?;
        let seq_path = self.dir.join("eid.seq");
        let mut n: u64 = match fsutil::read_optional(&seq_path).at(&seq_path)? {
            None => 0,
            Some(b) => String::from_utf8_lossy(&b)
                .trim()
                .parse()
                .map_err(|_| StoreError::Corrupt {
                    path: seq_path.clone(),
                    msg: "not a counter".into(),
                })?,
        };
        loop {
            n += 1;
            fsutil::atomic_write(&seq_path, n.to_string().as_bytes()).at(&seq_path)?;
            let eid = eid_for(n);
            let d = self.eid_dir(&eid);
            match fsutil::create_dir_synced(&d) {
                Ok(()) => return Ok(eid),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).at(&d),
            }
        }
    }

    pub fn write_claim(&self, eid: &str, claim: &ClaimRecord) -> Result<()> {
        let p = self.eid_dir(eid).join("claim.json");
        let bytes = serde_json::to_vec_pretty(claim).expect("claim serializes");
        fsutil::atomic_write(&p, &bytes).at(&p)
    }

    pub fn read_claim(&self, eid: &str) -> Result<Option<ClaimRecord>> {
        let p = self.eid_dir(eid).join("claim.json");
        match fsutil::read_optional(&p).at(&p)? {
            None => Ok(None),
            Some(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| StoreError::Corrupt {
                    path: p,
                    msg: e.to_string(),
                }),
        }
    }

    pub fn mark_executing(&self, eid: &str) -> Result<()> {
        let p = self.eid_dir(eid).join(EXECUTING_MARKER);
        fsutil::atomic_write(&p, b"").at(&p)
    }

    pub fn is_executing_marked(&self, eid: &str) -> bool {
        self.eid_dir(eid).join(EXECUTING_MARKER).exists()
    }

    pub fn write_run_log(&self, eid: &str, stdout: &[u8], stderr: &[u8]) -> Result<()> {
        let d = self.eid_dir(eid);
        for (name, bytes) in [("stderr.log", stderr), ("run.log", stdout)] {
            let p = d.join(name);
            match fsutil::write_once(&p, bytes) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if fs::read(&p).at(&p)? != bytes {
                        return Err(StoreError::RecordExists(eid.to_string()));
                    }
                }
                Err(e) => return Err(e).at(&p),
            }
        }
        Ok(())
    }

    pub fn read_run_log(&self, eid: &str) -> Result<Option<Vec<u8>>> {
        let p = self.eid_dir(eid).join("run.log");
        fsutil::read_optional(&p).at(&p)
    }

    /// Publishes `meta.json` for `eid`. Write-once.
    pub fn write_stage_meta(&self, meta: &StageMeta) -> Result<()> {
        let p = self.eid_dir(&meta.eid).join("meta.json");
        let bytes = serde_json::to_vec_pretty(meta).expect("meta serializes");
        match fsutil::write_once(&p, &bytes) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::RecordExists(meta.eid.clone()))
            }
            Err(e) => Err(e).at(&p),
        }
    }

    /// `Ok(None)` if absent, `Err(Corrupt)` if present but unreadable.
    pub fn read_stage_meta(&self, eid: &str) -> Result<Option<StageMeta>> {
        let p = self.eid_dir(eid).join("meta.json");
        match fsutil::read_optional(&p).at(&p)? {
            None => Ok(None),
            Some(b) => {
                let m: StageMeta =
                    serde_json::from_slice(&b).map_err(|e| StoreError::Corrupt {
                        path: p.clone(),
                        msg: e.to_string(),
                    })?;
                if m.eid != eid || m.cid != self.cid {
                    return Err(StoreError::Corrupt {
                        path: p,
                        msg: "eid or cid mismatch".into(),
                    });
                }
                Ok(Some(m))
            }
        }
    }

    /// Writes the response once. A second response for the same request is
    /// refused.
    pub fn spool_response(&self, resp: &StageResponse) -> Result<()> {
        let p = self.response_path(&resp.request_id);
        match fsutil::write_once(&p, &resp.to_json()) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::ResponseExists(resp.request_id.clone()))
            }
            Err(e) => Err(e).at(&p),
        }
    }

    pub fn response_exists(&self, request_id: &str) -> bool {
        self.response_path(request_id).exists()
    }

    /// All allocated EIDs in allocation order.
    pub fn list_eids(&self) -> Result<Vec<String>> {
        let d = self.enclaves_dir();
        let mut v: Vec<String> = fs::read_dir(&d)
            .at(&d)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| eid_number(n).is_some())
            .collect();
        v.sort_by(|a, b| cmp_eid(a, b));
        Ok(v)
    }

    /// Stages marked executing whose record is not yet published.
    pub fn count_in_flight(&self) -> Result<u32> {
        let mut n = 0;
        for eid in self.list_eids()? {
            let d = self.eid_dir(&eid);
            if d.join(EXECUTING_MARKER).exists() && !d.join("meta.json").exists() {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn remove_eid_dir(&self, eid: &str) -> Result<()> {
        let d = self.eid_dir(eid);
        match fs::remove_dir_all(&d) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e).at(&d),
        }
    }

    pub fn append_reject(&self, file: &str, request_id: Option<&str>, reason: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            at_ms: u64,
            file: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            request_id: Option<&'a str>,
            reason: &'a str,
        }
        let mut line = serde_json::to_vec(&Line {
            at_ms: unix_millis(),
            file,
            request_id,
            reason,
        })
        .expect("reject line serializes");
        line.push(b'\n');
        let p = self.rejects_log_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .at(&p)?;
        f.write_all(&line).at(&p)
    }

    pub fn read_pid_file(&self, path: &Path) -> Option<i32> {
        fs::read_to_string(path).ok()?.trim().parse().ok()
    }

    pub fn write_pid_file(&self, path: &Path, pid: i32) -> Result<()> {
        fsutil::atomic_write(path, pid.to_string().as_bytes()).at(path)
    }
}

/// Removes staging directories left behind by interrupted creates whose
/// creator is gone.
fn clean_stale_staging(root: &Path, cid: &str) {
    let prefixes = [format!(".{cid}.partial-"), format!(".{cid}.deleting-")];
    let Ok(rd) = fs::read_dir(root) else { return };
    for entry in rd.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(rest) = prefixes.iter().find_map(|p| name.strip_prefix(p.as_str())) else {
            continue;
        };
        let pid: Option<i32> = rest.split('-').next().and_then(|s| s.parse().ok());
        let alive = pid.is_some_and(|p| p != std::process::id() as i32 && pid_alive(p));
        if !alive {
            let _ = fs::remove_dir_all(entry.path());
        }
    }
}

static STAGING_COUNTER: AtomicU64 = AtomicU64::new(0);

fn staging_name(cid: &str, kind: &str) -> String {
    format!(
        ".{cid}.{kind}-{}-{}",
        std::process::id(),
        STAGING_COUNTER.fetch_add(1, AtomicOrdering::Relaxed)
    )
}

/// Creates `<root>/<cid>/` atomically: everything is built in a hidden
/// staging directory and renamed into place last, so a crash leaves either
/// no instance or a complete one.
pub fn init_statedir(
    root: &Path,
    cid: &str,
    bundle: &Bundle,
    reuse_bundle: bool,
    crash: &CrashInjector,
) -> Result<StateDir> {
    validate_cid(cid)?;
    fs::create_dir_all(root).at(root)?;
    let final_dir = root.join(cid);
    if final_dir.exists() {
        return Err(StoreError::Exists(cid.to_string()));
    }
    clean_stale_staging(root, cid);

    let staging = root.join(staging_name(cid, "partial"));
    let result = build_staging(&staging, cid, bundle, reuse_bundle, crash);
    if let Err(e) = result {
        if !matches!(e, StoreError::Crashed(_)) {
            let _ = fs::remove_dir_all(&staging);
        }
        return Err(e);
    }
    crash.check(CrashPoint::CreateBeforeRename)?;
    if let Err(e) = fs::rename(&staging, &final_dir) {
        let _ = fs::remove_dir_all(&staging);
        return if final_dir.exists() {
            Err(StoreError::Exists(cid.to_string()))
        } else {
            Err(e).at(&final_dir)
        };
    }
    fsutil::fsync_dir(root).at(root)?;
    StateDir::open(root, cid)
}

fn build_staging(
    staging: &Path,
    cid: &str,
    bundle: &Bundle,
    reuse_bundle: bool,
    crash: &CrashInjector,
) -> Result<()> {
    fs::create_dir(staging).at(staging)?;
    for sub in ["requests", "requests/claimed", "responses", "enclaves", "locks"] {
        let d = staging.join(sub);
        fs::create_dir(&d).at(&d)?;
    }
    crash.check(CrashPoint::CreateAfterStaging)?;

    let bundle_dst = staging.join("bundle");
    fsutil::copy_tree(&bundle.dir, &bundle_dst, reuse_bundle).at(&bundle_dst)?;
    crash.check(CrashPoint::CreateAfterBundle)?;

    let private = Bundle::load(&bundle_dst)?;
    let session = SessionState::new(cid, private.session_key(cid));
    let sp = staging.join("session.json");
    fsutil::atomic_write(&sp, &session.to_json()).at(&sp)?;

    let origin = bundle.dir.canonicalize().unwrap_or_else(|_| bundle.dir.clone());
    let rec = StateRecord::new_prepared(cid, origin, private.config.c4.require_conf);
    let p = staging.join("state.json");
    fsutil::atomic_write(&p, &serde_json::to_vec_pretty(&rec).expect("record serializes"))
        .at(&p)?;
    let ao = staging.join("anchor.out");
    fs::write(&ao, b"").at(&ao)?;
    let m = staging.join(COMPLETE_MARKER);
    fsutil::atomic_write(&m, b"").at(&m)?;
    fsutil::fsync_dir(staging).at(staging)
}

/// Removes an instance directory. Returns `false` if it did not exist.
///
/// The directory is first renamed to a hidden name so the CID disappears
/// atomically, then removed.
pub fn delete_statedir(root: &Path, cid: &str) -> Result<bool> {
    validate_cid(cid)?;
    let dir = root.join(cid);
    let tomb = root.join(staging_name(cid, "deleting"));
    match fs::rename(&dir, &tomb) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            clean_stale_staging(root, cid);
            return Ok(false);
        }
        Err(e) => return Err(e).at(&dir),
    }
    fsutil::fsync_dir(root).at(root)?;
    fs::remove_dir_all(&tomb).at(&tomb)?;
    Ok(true)
}

/// CIDs with a complete state directory under `root`.
pub fn list_cids(root: &Path) -> Result<Vec<String>> {
    let rd = match fs::read_dir(root) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e).at(root),
    };
    let mut v: Vec<String> = rd
        .flatten()
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| !n.starts_with('.') && root.join(n).join(COMPLETE_MARKER).exists())
        .collect();
    v.sort();
    Ok(v)
}
