// SPDX-License-Identifier: Apache-2.0

//! OCI-style entrypoints: create, start, state, kill, delete, wait, and the
//! detached monitor that supervises the anchor process.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, BundleError};
use crate::crash::CrashInjector;
use crate::fsutil;
use crate::lifecycle::{EventSource, LifecycleState, TerminationEvent, TerminationReason};
use crate::process::{pid_exited, send_signal, signal_group};
use crate::store::{
    delete_statedir, init_statedir, observation_time, StateDir, StateRecord, StoreError,
};

pub const OCI_VERSION: &str = "1.0.2";
pub const MONITOR_SUBCOMMAND: &str = "__monitor";
/// Exit code recorded when the anchor vanished without being observed.
pub const LOST_ANCHOR_CODE: u8 = 255;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("container {0} does not exist")]
    NotFound(String),
    #[error("container {cid} is {state:?}; cannot {op}")]
    IllegalState {
        cid: String,
        state: LifecycleState,
        op: &'static str,
    },
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
}

impl RuntimeError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Usage(_) => 1,
            RuntimeError::NotFound(_) => 2,
            RuntimeError::IllegalState { .. } => 3,
            RuntimeError::Timeout(_) => 4,
            RuntimeError::Internal(_) => 5,
        }
    }
}

impl From<StoreError> for RuntimeError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(c) => RuntimeError::NotFound(c),
            StoreError::Exists(c) => RuntimeError::Usage(format!("container {c} already exists")),
            StoreError::BadCid(c) => RuntimeError::Usage(format!("invalid container id {c:?}")),
            StoreError::Bundle(b) => RuntimeError::Usage(b.to_string()),
            other => RuntimeError::Internal(other.to_string()),
        }
    }
}

impl From<BundleError> for RuntimeError {
    fn from(e: BundleError) -> Self {
        RuntimeError::Usage(e.to_string())
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

/// OCI state document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OciState {
    pub oci_version: String,
    pub id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<i32>,
    pub bundle: PathBuf,
    pub annotations: BTreeMap<String, String>,
}

impl OciState {
    pub fn from_record(rec: &StateRecord) -> Self {
        let mut annotations = BTreeMap::new();
        annotations.insert("trust_flag".into(), serde_name(&rec.trust_flag));
        annotations.insert("health_flag".into(), serde_name(&rec.health_flag));
        annotations.insert("tee_phase".into(), serde_name(&rec.tee_phase));
        annotations.insert("ready".into(), rec.ready().to_string());
        Self {
            oci_version: OCI_VERSION.into(),
            id: rec.cid.clone(),
            status: rec.oci_status.as_str().into(),
            pid: rec
                .anchor_pid
                .filter(|_| rec.state == LifecycleState::Running),
            bundle: rec.bundle.clone(),
            annotations,
        }
    }
}

/// Serialized name of a unit enum variant.
fn serde_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Result of `wait`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WaitResult {
    pub id: String,
    pub status: String,
    pub state: LifecycleState,
    pub exit_code: Option<u8>,
}

/// How the anchor process ended, as observed by the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorExit {
    pub code: Option<i32>,
    pub signal: Option<i32>,
    pub kill_requested: bool,
}

impl AnchorExit {
    pub fn from_status(st: ExitStatus, kill_requested: bool) -> Self {
        Self {
            code: st.code(),
            signal: st.signal(),
            kill_requested,
        }
    }

    /// Termination event for this exit: requested kills are `killed`,
    /// clean exits `normal`, everything else an REE error.
    pub fn event(&self) -> TerminationEvent {
        let (code, reason) = if self.kill_requested {
            (0, TerminationReason::Killed)
        } else {
            match (self.code, self.signal) {
                (Some(0), _) => (0, TerminationReason::Normal),
                (Some(c), _) => (clamp_code(c), TerminationReason::Error),
                (None, Some(s)) => (clamp_code(128 + s), TerminationReason::Error),
                (None, None) => (LOST_ANCHOR_CODE, TerminationReason::Error),
            }
        };
        TerminationEvent::new(EventSource::Ree, code, reason, observation_time())
            .expect("REE events never carry the policy reason")
    }
}

fn clamp_code(c: i32) -> u8 {
    u8::try_from(c).ok().filter(|c| *c != 0).unwrap_or(255)
}

#[derive(Debug, Clone)]
pub struct Runtime {
    pub root: PathBuf,
    /// Binary re-executed as `<exe> __monitor <cid>` to supervise anchors.
    pub monitor_exe: PathBuf,
    pub poll: Duration,
    pub kill_grace: Duration,
    pub start_timeout: Duration,
}

impl Runtime {
    pub fn new(root: impl Into<PathBuf>, monitor_exe: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            monitor_exe: monitor_exe.into(),
            poll: Duration::from_millis(10),
            kill_grace: Duration::from_secs(5),
            start_timeout: Duration::from_secs(30),
        }
    }

    pub fn open(&self, cid: &str) -> Result<StateDir> {
        Ok(StateDir::open(&self.root, cid)?)
    }

    pub fn create(&self, cid: &str, bundle_dir: &Path, reuse_bundle: bool) -> Result<StateRecord> {
        self.create_with(cid, bundle_dir, reuse_bundle, &CrashInjector::none())
    }

    pub fn create_with(
        &self,
        cid: &str,
        bundle_dir: &Path,
        reuse_bundle: bool,
        crash: &CrashInjector,
    ) -> Result<StateRecord> {
        let bundle = Bundle::load(bundle_dir)?;
        match init_statedir(&self.root, cid, &bundle, reuse_bundle, crash) {
            Ok(sd) => Ok(sd.read_record()?),
            Err(StoreError::Exists(_)) => {
                let state = self.open(cid)?.read_record()?.state;
                Err(RuntimeError::IllegalState {
                    cid: cid.into(),
                    state,
                    op: "create",
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn state(&self, cid: &str) -> Result<OciState> {
        let sd = self.open(cid)?;
        Ok(OciState::from_record(&sd.read_record()?))
    }

    fn monitor_alive(&self, sd: &StateDir) -> bool {
        sd.read_pid_file(&sd.monitor_pid_path())
            .is_some_and(|p| !pid_exited(p))
    }

    fn anchor_alive(&self, rec: &StateRecord) -> bool {
        rec.anchor_pid.is_some_and(|p| !pid_exited(p))
    }

    /// Finalizes a running instance whose supervisor is gone. Uses the
    /// recorded anchor exit if the monitor got that far, otherwise records
    /// a lost anchor.
    fn finalize_orphaned(&self, sd: &StateDir) -> Result<StateRecord> {
        let exit: Option<AnchorExit> = fs::read(sd.anchor_exit_path())
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let event = match exit {
            Some(e) => e.event(),
            None => TerminationEvent::new(
                EventSource::Ree,
                LOST_ANCHOR_CODE,
                TerminationReason::Error,
                observation_time(),
            )
            .expect("valid event"),
        };
        let (rec, _) = sd.finalize_termination(&[event], c_untrusted(sd))?;
        Ok(rec)
    }

    /// True if nothing will ever finalize this running instance on its own.
    fn is_orphaned(&self, sd: &StateDir, rec: &StateRecord) -> bool {
        rec.state == LifecycleState::Running && !self.anchor_alive(rec) && !self.monitor_alive(sd)
    }

    pub fn start(&self, cid: &str) -> Result<StateRecord> {
        let sd = self.open(cid)?;
        let _g = sd.lock_start()?;
        let rec = sd.read_record()?;
        match rec.state {
            LifecycleState::Prepared => {}
            LifecycleState::Running if self.anchor_alive(&rec) => return Ok(rec),
            LifecycleState::Running => {
                let rec = if self.monitor_alive(&sd) {
                    self.wait_terminal(&sd, Some(self.start_timeout))?
                } else {
                    self.finalize_orphaned(&sd)?
                };
                return Err(RuntimeError::IllegalState {
                    cid: cid.into(),
                    state: rec.state,
                    op: "start",
                });
            }
            s => {
                return Err(RuntimeError::IllegalState {
                    cid: cid.into(),
                    state: s,
                    op: "start",
                })
            }
        }

        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(sd.dir().join("monitor.log"))
            .map_err(|e| RuntimeError::Internal(format!("monitor log: {e}")))?;
        let mut cmd = Command::new(&self.monitor_exe);
        cmd.arg(MONITOR_SUBCOMMAND)
            .arg(cid)
            .arg("--statedir-root")
            .arg(&self.root)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log);
        // SAFETY: setsid is async-signal-safe.
        unsafe {
            cmd.pre_exec(|| {
                libc::setsid();
                Ok(())
            });
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| RuntimeError::Internal(format!("spawn monitor: {e}")))?;
        let monitor_pid = child.id() as i32;
        // reap the monitor if this process outlives it
        std::thread::spawn(move || {
            let _ = child.wait();
        });

        let deadline = Instant::now() + self.start_timeout;
        loop {
            let rec = sd.read_record()?;
            if rec.state != LifecycleState::Prepared {
                return Ok(rec);
            }
            if pid_exited(monitor_pid) {
                let rec = sd.read_record()?;
                if rec.state != LifecycleState::Prepared {
                    return Ok(rec);
                }
                return Err(RuntimeError::Internal(
                    "monitor exited before the anchor started".into(),
                ));
            }
            if Instant::now() >= deadline {
                return Err(RuntimeError::Timeout(format!("start {cid}")));
            }
            std::thread::sleep(self.poll);
        }
    }

    /// Body of the detached monitor process.
    pub fn run_monitor(&self, cid: &str) -> Result<StateRecord> {
        let sd = self.open(cid)?;
        sd.write_pid_file(&sd.monitor_pid_path(), std::process::id() as i32)?;
        let bundle = Bundle::load(&sd.bundle_dir())?;
        let program = bundle.anchor_program()?;

        {
            let _g = sd.lock_session()?;
            let mut session = sd.load_session()?;
            session.advance_epoch();
            sd.save_session(&session)?;
        }

        let spawn_failed = |msg: String| -> Result<StateRecord> {
            log::error!("{cid}: {msg}");
            let ev = TerminationEvent::new(
                EventSource::Ree,
                127,
                TerminationReason::Error,
                observation_time(),
            )
            .expect("valid event");
            Ok(sd.finalize_termination(&[ev], bundle.config.c4.c_untrusted)?.0)
        };

        let out = match OpenOptions::new()
            .create(true)
            .append(true)
            .open(sd.anchor_out_path())
        {
            Ok(f) => f,
            Err(e) => return spawn_failed(format!("anchor.out: {e}")),
        };
        let err = match out.try_clone() {
            Ok(f) => f,
            Err(e) => return spawn_failed(format!("anchor.out: {e}")),
        };
        let proc_cfg = &bundle.config.process;
        let mut cmd = Command::new(&program);
        cmd.args(proc_cfg.args.iter().skip(1))
            .current_dir(bundle.rootfs().join(proc_cfg.cwd.trim_start_matches('/')))
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin");
        for kv in &proc_cfg.env {
            if let Some((k, v)) = kv.split_once('=') {
                cmd.env(k, v);
            }
        }
        cmd.env("C4_CID", cid)
            .env("C4_STATEDIR", sd.dir())
            .env("C4_SESSION_PATH", sd.session_path())
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err);
        // SAFETY: setpgid is async-signal-safe.
        unsafe {
            cmd.pre_exec(|| {
                libc::setpgid(0, 0);
                Ok(())
            });
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return spawn_failed(format!("spawn {}: {e}", program.display())),
        };
        let pid = child.id() as i32;
        sd.write_pid_file(&sd.anchor_pid_path(), pid)?;

        let promoted = sd.modify_record(|r| {
            if r.state != LifecycleState::Prepared {
                return Ok(false);
            }
            r.state = LifecycleState::Running;
            r.anchor_pid = Some(pid);
            r.prepared_r = true;
            Ok(true)
        });
        match promoted {
            Ok((_, true)) => {}
            Ok((_, false)) | Err(_) => {
                // killed or deleted while starting
                signal_group(pid, libc::SIGKILL);
                let _ = child.wait();
                return Ok(sd.read_record()?);
            }
        }

        let status = child
            .wait()
            .map_err(|e| RuntimeError::Internal(format!("wait anchor: {e}")))?;
        // anything the anchor left in its group goes with it
        signal_group(pid, libc::SIGKILL);
        let exit = AnchorExit::from_status(status, sd.kill_requested_path().exists());
        let bytes = serde_json::to_vec(&exit).expect("exit serializes");
        if let Err(e) = fsutil::atomic_write(&sd.anchor_exit_path(), &bytes) {
            log::warn!("{cid}: anchor.exit: {e}");
        }
        let (rec, _) = sd.finalize_termination(&[exit.event()], bundle.config.c4.c_untrusted)?;
        Ok(rec)
    }

    fn wait_terminal(&self, sd: &StateDir, timeout: Option<Duration>) -> Result<StateRecord> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let rec = sd.read_record()?;
            if rec.state.is_terminal() {
                return Ok(rec);
            }
            if self.is_orphaned(sd, &rec) {
                // the monitor may be finalizing right now; look once more
                std::thread::sleep(self.poll);
                let rec = sd.read_record()?;
                if rec.state.is_terminal() {
                    return Ok(rec);
                }
                if self.is_orphaned(sd, &rec) {
                    return self.finalize_orphaned(sd);
                }
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(RuntimeError::Timeout(sd.cid().to_string()));
            }
            std::thread::sleep(self.poll);
        }
    }

    pub fn wait(&self, cid: &str, timeout: Option<Duration>) -> Result<WaitResult> {
        let sd = self.open(cid)?;
        let rec = self.wait_terminal(&sd, timeout)?;
        Ok(WaitResult {
            id: rec.cid.clone(),
            status: rec.oci_status.as_str().into(),
            state: rec.state,
            exit_code: rec.exit_code,
        })
    }

    pub fn kill(&self, cid: &str) -> Result<StateRecord> {
        self.kill_with(cid, libc::SIGTERM)
    }

    /// Stops the instance. A terminal instance is left alone; a prepared one
    /// is stopped directly; a running anchor gets `sig`, then SIGKILL after
    /// the grace period.
    pub fn kill_with(&self, cid: &str, sig: i32) -> Result<StateRecord> {
        let sd = self.open(cid)?;
        let rec = sd.read_record()?;
        if rec.state.is_terminal() {
            return Ok(rec);
        }
        fsutil::atomic_write(&sd.kill_requested_path(), b"")
            .map_err(|e| RuntimeError::Internal(format!("kill marker: {e}")))?;
        let killed = || {
            TerminationEvent::new(
                EventSource::Ree,
                0,
                TerminationReason::Killed,
                observation_time(),
            )
            .expect("valid event")
        };
        if rec.state == LifecycleState::Prepared {
            let (rec, _) = sd.finalize_termination(&[killed()], c_untrusted(&sd))?;
            // the monitor may have promoted the anchor just before
            if let Some(pid) = rec.anchor_pid {
                signal_group(pid, libc::SIGKILL);
            }
            return Ok(rec);
        }

        let rec = sd.read_record()?;
        if let Some(pid) = rec.anchor_pid {
            signal_group(pid, sig);
            send_signal(pid, sig);
        }
        match self.wait_terminal(&sd, Some(self.kill_grace)) {
            Ok(r) => return Ok(r),
            Err(RuntimeError::Timeout(_)) => {}
            Err(e) => return Err(e),
        }
        if let Some(pid) = sd.read_record()?.anchor_pid {
            signal_group(pid, libc::SIGKILL);
            send_signal(pid, libc::SIGKILL);
        }
        match self.wait_terminal(&sd, Some(self.kill_grace)) {
            Ok(r) => Ok(r),
            Err(RuntimeError::Timeout(_)) => Ok(sd.finalize_termination(&[killed()], c_untrusted(&sd))?.0),
            Err(e) => Err(e),
        }
    }

    /// Removes a terminal instance. `force` kills a live one first.
    /// Deleting an instance that does not exist succeeds.
    pub fn delete(&self, cid: &str, force: bool) -> Result<()> {
        let sd = match self.open(cid) {
            Ok(sd) => sd,
            Err(RuntimeError::NotFound(_)) => {
                delete_statedir(&self.root, cid)?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let mut rec = match sd.read_record() {
            Ok(r) => r,
            Err(StoreError::Corrupt { .. }) if force => {
                delete_statedir(&self.root, cid)?;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        if !rec.state.is_terminal() {
            if self.is_orphaned(&sd, &rec) {
                rec = self.finalize_orphaned(&sd)?;
            } else if force {
                rec = self.kill(cid)?;
            } else {
                return Err(RuntimeError::IllegalState {
                    cid: cid.into(),
                    state: rec.state,
                    op: "delete",
                });
            }
        }
        for pid in [rec.anchor_pid, sd.read_pid_file(&sd.monitor_pid_path())]
            .into_iter()
            .flatten()
        {
            if !pid_exited(pid) {
                signal_group(pid, libc::SIGKILL);
                send_signal(pid, libc::SIGKILL);
            }
        }
        delete_statedir(&self.root, cid)?;
        Ok(())
    }
}

fn c_untrusted(sd: &StateDir) -> u8 {
    Bundle::load(&sd.bundle_dir())
        .map(|b| b.config.c4.c_untrusted)
        .unwrap_or(crate::lifecycle::DEFAULT_C_UNTRUSTED)
}
