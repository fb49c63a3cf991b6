// SPDX-License-Identifier: Apache-2.0

//! Runs each stage as a local process from the bundle's rootfs.
//!
//! Each invocation gets a fresh working directory and its own process
//! group, so a timeout or cancellation can kill everything it spawned.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::{
    lookup_stage, Backend, BackendError, BackendHandle, CancelToken, Evidence, ExecRequest,
    StageOutcome,
};
use crate::bundle::Bundle;

pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;

pub struct LocalExecBackend {
    bundle: Bundle,
}

impl LocalExecBackend {
    pub fn new(bundle: Bundle) -> Self {
        Self { bundle }
    }

    fn program(&self, handle: &BackendHandle) -> Result<PathBuf, BackendError> {
        let p = handle.spec.program.as_deref().ok_or_else(|| {
            BackendError::PrepareFailed(format!("stage {} has no program", handle.stage))
        })?;
        self.bundle
            .resolve_in_rootfs(p)
            .map_err(|e| BackendError::PrepareFailed(e.to_string()))
    }
}

fn exit_rc(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => c,
        (None, Some(sig)) => 128 + sig,
        _ => 255,
    }
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall on a process group we created.
    unsafe {
        libc::kill(-(pgid as i32), libc::SIGKILL);
    }
}

fn reader<R: Read + Send + 'static>(r: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = r {
            let _ = r.read_to_end(&mut buf);
        }
        buf
    })
}

impl Backend for LocalExecBackend {
    fn id(&self) -> &str {
        "localexec"
    }

    fn prepare(&self, cid: &str, eid: &str, stage: &str) -> Result<BackendHandle, BackendError> {
        let spec = lookup_stage(&self.bundle.config.c4.stage_table, stage)?;
        let handle = BackendHandle {
            cid: cid.to_string(),
            eid: eid.to_string(),
            stage: stage.to_string(),
            spec: spec.clone(),
        };
        self.program(&handle)?;
        Ok(handle)
    }

    fn execute(
        &self,
        handle: &BackendHandle,
        req: &ExecRequest<'_>,
        cancel: &CancelToken,
    ) -> StageOutcome {
        let failed = |msg: String| StageOutcome {
            rc: super::RC_PREPARE_FAILED,
            stdout: Vec::new(),
            stderr: msg.into_bytes(),
            evidence: None,
            failure: Some("prepare_failed".into()),
        };
        let program = match self.program(handle) {
            Ok(p) => p,
            Err(e) => return failed(e.to_string()),
        };
        let digest = match std::fs::read(&program) {
            Ok(bytes) => hex::encode(Sha256::digest(bytes)),
            Err(e) => return failed(e.to_string()),
        };
        let workdir = match tempfile::Builder::new().prefix("c4-stage-").tempdir() {
            Ok(d) => d,
            Err(e) => return failed(e.to_string()),
        };

        let mut cmd = Command::new(&program);
        cmd.args(&handle.spec.args)
            .current_dir(workdir.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("C4_CID", &handle.cid)
            .env("C4_EID", &handle.eid)
            .env("C4_STAGE", &handle.stage)
            .env("C4_REQUEST_ID", req.request_id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // SAFETY: only async-signal-safe calls between fork and exec.
        unsafe {
            cmd.pre_exec(|| {
                if libc::setpgid(0, 0) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                let no_core = libc::rlimit {
                    rlim_cur: 0,
                    rlim_max: 0,
                };
                libc::setrlimit(libc::RLIMIT_CORE, &no_core);
                Ok(())
            });
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return failed(format!("spawn {}: {e}", program.display())),
        };
        let pgid = child.id();

        let payload = req.payload.to_vec();
        let stdin = child.stdin.take();
        let writer = thread::spawn(move || {
            if let Some(mut s) = stdin {
                let _ = s.write_all(&payload);
            }
        });
        let out = reader(child.stdout.take());
        let err = reader(child.stderr.take());

        let timeout = Duration::from_millis(handle.spec.timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS));
        let started = Instant::now();
        let mut interrupted = None;
        let status = loop {
            match child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) => {}
                Err(_) => break None,
            }
            if cancel.is_cancelled() {
                interrupted = Some(false);
            } else if started.elapsed() >= timeout {
                interrupted = Some(true);
            }
            if interrupted.is_some() {
                kill_group(pgid);
                let _ = child.wait();
                break None;
            }
            thread::sleep(Duration::from_millis(2));
        };
        // reap anything the stage left behind in its group
        kill_group(pgid);
        let _ = writer.join();
        let stdout = out.join().unwrap_or_default();
        let stderr = err.join().unwrap_or_default();

        match (interrupted, status) {
            (Some(true), _) => StageOutcome::timed_out(stdout, stderr),
            (Some(false), _) => StageOutcome::cancelled(stdout, stderr),
            (None, None) => StageOutcome {
                rc: 255,
                stdout,
                stderr,
                evidence: None,
                failure: Some("wait_failed".into()),
            },
            (None, Some(st)) => {
                let mut extra = BTreeMap::new();
                extra.insert("attestation".into(), "none".into());
                extra.insert("cid".into(), handle.cid.clone());
                extra.insert("eid".into(), handle.eid.clone());
                extra.insert("program".into(), program.display().to_string());
                StageOutcome {
                    rc: exit_rc(st),
                    stdout,
                    stderr,
                    evidence: Some(Evidence {
                        tee_type: "none".into(),
                        evidence_type: "localexec-digest".into(),
                        measurement_hash: digest,
                        extra,
                    }),
                    failure: None,
                }
            }
        }
    }

    fn destroy(&self, _handle: &BackendHandle) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RC_CANCELLED, RC_TIMEOUT};
    use std::fs;
    use std::os::unix::fs::PermissionsExt;

    fn bundle(dir: &std::path::Path) -> Bundle {
        let bin = dir.join("rootfs/bin");
        fs::create_dir_all(&bin).unwrap();
        let script = |name: &str, body: &str| {
            let p = bin.join(name);
            fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
            fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
        };
        script("anchor", "exit 0");
        script("echo", "cat; printf ' %s' \"$C4_EID\"");
        script("fail", "echo oops >&2; exit 9");
        script("hang", "sleep 30 & sleep 30");
        fs::write(
            dir.join("config.json"),
            r#"{"process":{"args":["/bin/anchor"]},"root":{"path":"rootfs"},
                "c4":{"backend_id":"localexec","stage_table":{
                  "echo":{"program":"/bin/echo"},
                  "fail":{"program":"/bin/fail"},
                  "hang":{"program":"/bin/hang","timeout_ms":200}}}}"#,
        )
        .unwrap();
        Bundle::load(dir).unwrap()
    }

    fn exec(b: &LocalExecBackend, stage: &str, cancel: &CancelToken) -> StageOutcome {
        let h = b.prepare("c1", "eid-0003", stage).unwrap();
        b.execute(
            &h,
            &ExecRequest {
                request_id: "1-0-aa",
                payload: b"in",
            },
            cancel,
        )
    }

    #[test]
    fn runs_program_with_payload_on_stdin() {
        let d = tempfile::tempdir().unwrap();
        let b = LocalExecBackend::new(bundle(d.path()));
        let out = exec(&b, "echo", &CancelToken::new());
        assert_eq!(out.rc, 0);
        assert_eq!(out.stdout, b"in eid-0003");
        let ev = out.evidence.unwrap();
        assert_eq!(ev.evidence_type, "localexec-digest");
        assert_eq!(ev.measurement_hash.len(), 64);
    }

    #[test]
    fn nonzero_exit_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let b = LocalExecBackend::new(bundle(d.path()));
        let out = exec(&b, "fail", &CancelToken::new());
        assert_eq!(out.rc, 9);
        assert_eq!(out.stderr, b"oops\n");
    }

    #[test]
    fn timeout_kills_the_group() {
        let d = tempfile::tempdir().unwrap();
        let b = LocalExecBackend::new(bundle(d.path()));
        let t = Instant::now();
        let out = exec(&b, "hang", &CancelToken::new());
        assert_eq!(out.rc, RC_TIMEOUT);
        assert!(t.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn cancellation() {
        let d = tempfile::tempdir().unwrap();
        let b = LocalExecBackend::new(bundle(d.path()));
        let c = CancelToken::new();
        c.cancel();
        assert_eq!(exec(&b, "hang", &c).rc, RC_CANCELLED);
    }

    #[test]
    fn missing_stage() {
        let d = tempfile::tempdir().unwrap();
        let b = LocalExecBackend::new(bundle(d.path()));
        assert!(matches!(b.prepare("c", "e", "nope"), Err(BackendError::StageNotFound(_))));
    }
}
