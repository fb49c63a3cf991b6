// SPDX-License-Identifier: Apache-2.0

//! One create→start→serve→wait→kill→delete round, each step a separate
//! process invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Output, Stdio};
use std::time::{Duration, Instant};

use c4_core::crash::{CrashPoint, CRASH_ENV};
use c4_core::lifecycle::LifecycleState;
use c4_core::runtime::WaitResult;
use c4_core::store::StateDir;
use serde::{Deserialize, Serialize};

use super::audit::{audit_artifacts, audit_exactly_once, audit_state_consistency, AuditResult, ExactlyOnce, Violation};
use super::Tools;
use crate::anchor::{parse_report, AnchorReport};

/// Status reported for a command killed by `sig`.
pub fn signal_status(sig: i32) -> i32 {
    128 + sig
}

fn status_code(st: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    st.code()
        .or_else(|| st.signal().map(signal_status))
        .unwrap_or(-1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub status: i32,
    pub expected: i32,
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stderr: String,
}

impl CommandRecord {
    /// Expected nonzero statuses count as success.
    pub fn ok(&self) -> bool {
        self.status == self.expected
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub create_ms: f64,
    pub start_ms: f64,
    /// create plus start: until the anchor runs.
    pub bringup_ms: f64,
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOptions {
    pub cid: String,
    pub bundle: PathBuf,
    pub statedir_root: PathBuf,
    pub reuse_bundle: bool,
    pub serve_instances: usize,
    pub workers: usize,
    pub fail_fast: bool,
    pub backend: Option<String>,
    /// Shared execution ledger; enables the exactly-once audit.
    pub ledger: Option<PathBuf>,
    pub poll_ms: u64,
    /// Crash `c4run create` here first, then create again.
    pub crash_create: Option<CrashPoint>,
    /// Crash the first serve process here, then recover and serve again.
    pub crash_serve: Option<CrashPoint>,
    /// Expected terminal state and exit code.
    pub expect: (LifecycleState, u8),
    pub wait_timeout: Duration,
}

impl RoundOptions {
    pub fn new(cid: impl Into<String>, bundle: &Path, statedir_root: &Path) -> Self {
        Self {
            cid: cid.into(),
            bundle: bundle.to_path_buf(),
            statedir_root: statedir_root.to_path_buf(),
            reuse_bundle: false,
            serve_instances: 1,
            workers: 1,
            fail_fast: true,
            backend: None,
            ledger: None,
            poll_ms: 2,
            crash_create: None,
            crash_serve: None,
            expect: (LifecycleState::Stopped, 0),
            wait_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub cid: String,
    pub commands: Vec<CommandRecord>,
    pub ipr: AuditResult,
    pub scr: AuditResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exactly_once: Option<ExactlyOnce>,
    pub terminal: Option<WaitResult>,
    pub terminal_as_expected: bool,
    pub anchor: Option<AnchorReport>,
    pub timings: Timings,
    pub k: usize,
    pub elapsed_s: f64,
    /// `k / elapsed_s`, stages per second.
    pub throughput: f64,
}

impl RoundReport {
    /// Every phase ran and ended as expected.
    pub fn completed(&self) -> bool {
        self.terminal_as_expected && self.commands.iter().all(CommandRecord::ok)
    }

    pub fn artifacts_ok(&self) -> bool {
        self.ipr.pass() && self.exactly_once.as_ref().map_or(true, ExactlyOnce::pass)
    }
}

pub fn throughput(k: usize, elapsed_s: f64) -> f64 {
    if elapsed_s > 0.0 {
        k as f64 / elapsed_s
    } else {
        0.0
    }
}

struct Driver<'a> {
    tools: &'a Tools,
    opts: &'a RoundOptions,
    commands: Vec<CommandRecord>,
}

impl Driver<'_> {
    fn base(&self, sub: &str) -> Command {
        let mut c = Command::new(&self.tools.c4run);
        c.arg("--statedir-root")
            .arg(&self.opts.statedir_root)
            .arg("--poll-ms")
            .arg(self.opts.poll_ms.to_string())
            .arg(sub)
            .env_remove(CRASH_ENV)
            .stdin(Stdio::null());
        c
    }

    fn record(&mut self, name: &str, out: std::io::Result<Output>, expected: i32, t: Instant) -> String {
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let (status, stdout, stderr) = match out {
            Ok(o) => (
                status_code(o.status),
                String::from_utf8_lossy(&o.stdout).into_owned(),
                String::from_utf8_lossy(&o.stderr).into_owned(),
            ),
            Err(e) => (-1, String::new(), e.to_string()),
        };
        let stderr = if status == expected { String::new() } else { stderr };
        self.commands.push(CommandRecord {
            command: name.into(),
            status,
            expected,
            elapsed_ms: ms,
            stderr,
        });
        stdout
    }

    fn run(&mut self, name: &str, mut cmd: Command, expected: i32) -> (String, f64) {
        let t = Instant::now();
        let out = cmd.output();
        let ms = t.elapsed().as_secs_f64() * 1e3;
        (self.record(name, out, expected, t), ms)
    }

    fn spawn_serve(&self, crash: Option<CrashPoint>) -> std::io::Result<Child> {
        let o = self.opts;
        let mut c = self.base("serve");
        c.arg(&o.cid)
            .arg("--workers")
            .arg(o.workers.to_string())
            .arg("--fail-fast")
            .arg(o.fail_fast.to_string());
        if let Some(b) = &o.backend {
            c.arg("--backend").arg(b);
        }
        if let Some(l) = &o.ledger {
            c.arg("--exec-ledger").arg(l);
        }
        if let Some(p) = crash {
            c.env(CRASH_ENV, p.as_str());
        }
        c.stdout(Stdio::piped()).stderr(Stdio::piped()).spawn()
    }

    fn join(&mut self, name: &str, child: std::io::Result<Child>, expected: i32, t: Instant) {
        let out = child.and_then(Child::wait_with_output);
        self.record(name, out, expected, t);
    }
}

/// Runs one full round and audits it.
pub fn run_round(tools: &Tools, opts: &RoundOptions, round: usize) -> RoundReport {
    let mut d = Driver {
        tools,
        opts,
        commands: Vec::new(),
    };
    let cid = opts.cid.as_str();
    let t0 = Instant::now();
    let abort = signal_status(libc::SIGABRT);

    let create = |d: &Driver, crash: Option<CrashPoint>| {
        let mut c = d.base("create");
        c.arg(cid).arg("--bundle").arg(&opts.bundle);
        if opts.reuse_bundle {
            c.arg("--reuse-bundle");
        }
        if let Some(p) = crash {
            c.env(CRASH_ENV, p.as_str());
        }
        c
    };
    if let Some(p) = opts.crash_create {
        let c = create(&d, Some(p));
        d.run("create(crash)", c, abort);
        let mut c = d.base("state");
        c.arg(cid);
        d.run("state(after crash)", c, 2);
    }
    let c = create(&d, None);
    let (_, create_ms) = d.run("create", c, 0);
    let mut c = d.base("start");
    c.arg(cid);
    let (_, start_ms) = d.run("start", c, 0);

    let mut servers = Vec::new();
    if let Some(p) = opts.crash_serve {
        let t = Instant::now();
        let child = d.spawn_serve(Some(p));
        d.join("serve(crash)", child, abort, t);
        let mut c = d.base("recover");
        c.arg(cid).arg("--fail-fast").arg(opts.fail_fast.to_string());
        if let Some(b) = &opts.backend {
            c.arg("--backend").arg(b);
        }
        if let Some(l) = &opts.ledger {
            c.arg("--exec-ledger").arg(l);
        }
        d.run("recover", c, 0);
    }
    for _ in 0..opts.serve_instances.max(1) {
        servers.push((Instant::now(), d.spawn_serve(None)));
    }

    let mut c = d.base("wait");
    c.arg(cid)
        .arg("--timeout-ms")
        .arg(opts.wait_timeout.as_millis().to_string());
    let (out, _) = d.run("wait", c, 0);
    let terminal: Option<WaitResult> = serde_json::from_str(&out).ok();
    for (i, (t, s)) in servers.into_iter().enumerate() {
        d.join(&format!("serve[{i}]"), s, 0, t);
    }

    let (ipr, scr, exactly_once, anchor) = match StateDir::open(&opts.statedir_root, cid) {
        Ok(sd) => {
            let anchor = fs::read_to_string(sd.anchor_out_path())
                .ok()
                .and_then(|s| parse_report(&s));
            let issued = anchor.as_ref().map(|a| a.request_ids.clone()).unwrap_or_default();
            (
                audit_artifacts(&sd, &issued),
                audit_state_consistency(&sd),
                opts.ledger.as_ref().map(|l| audit_exactly_once(&sd, l)),
                anchor,
            )
        }
        Err(e) => {
            let mut missing = AuditResult::default();
            missing.violations.push(Violation {
                subject: cid.into(),
                predicate: "statedir".into(),
                detail: e.to_string(),
            });
            (missing.clone(), missing, None, None)
        }
    };

    let mut c = d.base("kill");
    c.arg(cid);
    d.run("kill", c, 0);
    let mut c = d.base("delete");
    c.arg(cid);
    d.run("delete", c, 0);
    let mut c = d.base("state");
    c.arg(cid);
    d.run("state(after delete)", c, 2);

    let terminal_as_expected = terminal
        .as_ref()
        .is_some_and(|w| (w.state, w.exit_code) == (opts.expect.0, Some(opts.expect.1)));
    let (k, elapsed_s) = anchor.as_ref().map_or((0, 0.0), |a| (a.k, a.elapsed_s));
    RoundReport {
        round,
        cid: cid.into(),
        commands: d.commands,
        ipr,
        scr,
        exactly_once,
        terminal,
        terminal_as_expected,
        anchor,
        timings: Timings {
            create_ms,
            start_ms,
            bringup_ms: create_ms + start_ms,
            end_to_end_ms: t0.elapsed().as_secs_f64() * 1e3,
        },
        k,
        elapsed_s,
        throughput: throughput(k, elapsed_s),
    }
}
