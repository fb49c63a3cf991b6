// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use c4_core::backend::{self, ExecutionLedger, FaultPolicy, LEDGER_ENV};
use c4_core::bundle::Bundle;
use c4_core::crash::CrashInjector;
use c4_core::runtime::{Runtime, RuntimeError, MONITOR_SUBCOMMAND};
use c4_core::serve::{ServeConfig, ServeError, Server};
use c4_core::store::{StateDir, StoreError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "c4run", version, about = "Runtime for composite confidential workloads")]
struct Cli {
    /// Directory holding one state directory per container.
    #[arg(long, global = true, env = "C4RUN_STATEDIR_ROOT", default_value = "/run/c4run")]
    statedir_root: PathBuf,
    /// Polling interval for wait, start and serve.
    #[arg(long, global = true)]
    poll_ms: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a container from a bundle.
    Create {
        cid: String,
        #[arg(long, default_value = ".")]
        bundle: PathBuf,
        /// Hardlink the bundle instead of copying it.
        #[arg(long)]
        reuse_bundle: bool,
    },
    /// Launch the anchor process.
    Start { cid: String },
    /// Print the OCI state document.
    State { cid: String },
    /// Block until the container is terminal and print its exit result.
    Wait {
        cid: String,
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
    /// Stop the anchor and cancel running stages.
    Kill {
        cid: String,
        /// Signal name or number sent first.
        signal: Option<String>,
        #[arg(long)]
        grace_ms: Option<u64>,
    },
    /// Remove a terminal container.
    Delete {
        cid: String,
        /// Kill a live container first.
        #[arg(long)]
        force: bool,
    },
    /// Process stage requests for a container.
    Serve {
        cid: String,
        /// Override the bundle's backend (sim, localexec).
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        fail_fast: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Exit once the request spool is empty.
        #[arg(long)]
        until_idle: bool,
        /// Append one line per backend execution to this file.
        #[arg(long, env = LEDGER_ENV)]
        exec_ledger: Option<PathBuf>,
        /// Simulated prepare failure after this many stages.
        #[arg(long)]
        fail_prepare_after: Option<u64>,
    },
    /// Repair the request spool after a crash.
    Recover {
        cid: String,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        fail_fast: bool,
        #[arg(long, env = LEDGER_ENV)]
        exec_ledger: Option<PathBuf>,
    },
    #[command(name = MONITOR_SUBCOMMAND, hide = true)]
    Monitor { cid: String },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        Self {
            code: e.exit_code() as u8,
            msg: e.to_string(),
        }
    }
}

impl From<ServeError> for Failure {
    fn from(e: ServeError) -> Self {
        let code = match &e {
            ServeError::Busy(_) => 3,
            ServeError::Store(StoreError::NotFound(_)) => 2,
            ServeError::Store(StoreError::BadCid(_)) => 1,
            _ => 5,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        RuntimeError::from(e).into()
    }
}

fn parse_signal(s: &str) -> Option<i32> {
    if let Ok(n) = s.parse::<i32>() {
        return (n > 0 && n < 65).then_some(n);
    }
    let name = s.to_ascii_uppercase();
    let name = name.strip_prefix("SIG").unwrap_or(&name);
    Some(match name {
        "TERM" => libc::SIGTERM,
        "KILL" => libc::SIGKILL,
        "INT" => libc::SIGINT,
        "HUP" => libc::SIGHUP,
        "QUIT" => libc::SIGQUIT,
        "USR1" => libc::SIGUSR1,
        "USR2" => libc::SIGUSR2,
        _ => return None,
    })
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn server(
    root: &std::path::Path,
    cid: &str,
    backend_id: Option<&str>,
    faults: FaultPolicy,
    cfg: ServeConfig,
) -> Result<Server, Failure> {
    let sd = StateDir::open(root, cid)?;
    let bundle = Bundle::load(&sd.bundle_dir()).map_err(RuntimeError::from)?;
    let backend = backend::for_bundle(&bundle, backend_id, faults).map_err(|e| Failure {
        code: 1,
        msg: e.to_string(),
    })?;
    Ok(Server::new(sd, backend, cfg))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exe = std::env::current_exe().map_err(|e| Failure {
        code: 5,
        msg: format!("current_exe: {e}"),
    })?;
    let mut rt = Runtime::new(&cli.statedir_root, exe);
    let poll = cli.poll_ms.map(Duration::from_millis);
    if let Some(p) = poll {
        rt.poll = p;
    }
    match cli.cmd {
        Cmd::Create {
            cid,
            bundle,
            reuse_bundle,
        } => {
            rt.create_with(&cid, &bundle, reuse_bundle, &CrashInjector::from_env())?;
        }
        Cmd::Start { cid } => {
            rt.start(&cid)?;
        }
        Cmd::State { cid } => print_json(&rt.state(&cid)?),
        Cmd::Wait { cid, timeout_ms } => {
            print_json(&rt.wait(&cid, timeout_ms.map(Duration::from_millis))?)
        }
        Cmd::Kill {
            cid,
            signal,
            grace_ms,
        } => {
            let sig = match signal.as_deref() {
                None => libc::SIGTERM,
                Some(s) => parse_signal(s).ok_or_else(|| Failure {
                    code: 1,
                    msg: format!("unknown signal {s:?}"),
                })?,
            };
            if let Some(g) = grace_ms {
                rt.kill_grace = Duration::from_millis(g);
            }
            rt.kill_with(&cid, sig)?;
        }
        Cmd::Delete { cid, force } => rt.delete(&cid, force)?,
        Cmd::Serve {
            cid,
            backend,
            fail_fast,
            workers,
            until_idle,
            exec_ledger,
            fail_prepare_after,
        } => {
            let mut cfg = ServeConfig {
                fail_fast,
                workers,
                until_idle,
                crash: CrashInjector::from_env(),
                ledger: Arc::new(ExecutionLedger::new(exec_ledger)),
                ..Default::default()
            };
            if let Some(p) = poll {
                cfg.poll = p;
            }
            let faults = FaultPolicy {
                fail_prepare_after,
                ..Default::default()
            };
            let srv = server(&cli.statedir_root, &cid, backend.as_deref(), faults, cfg)?;
            if srv.statedir().read_record()?.state.is_terminal() {
                log::warn!("{cid} is terminal; nothing to serve");
            }
            let stats = srv.serve()?;
            println!(
                "{}",
                serde_json::json!({
                    "cid": cid,
                    "accepted": stats.accepted,
                    "rejected": stats.rejected,
                    "executed": stats.executed,
                })
            );
        }
        Cmd::Recover {
            cid,
            backend,
            fail_fast,
            exec_ledger,
        } => {
            let cfg = ServeConfig {
                fail_fast,
                ledger: Arc::new(ExecutionLedger::new(exec_ledger)),
                ..Default::default()
            };
            let srv = server(
                &cli.statedir_root,
                &cid,
                backend.as_deref(),
                FaultPolicy::default(),
                cfg,
            )?;
            let r = srv.recover()?;
            println!(
                "{}",
                serde_json::json!({
                    "cid": cid,
                    "responses_regenerated": r.responses_regenerated,
                    "ambiguous": r.ambiguous,
                    "resumed": r.resumed,
                    "requeued": r.requeued,
                    "cleaned": r.cleaned,
                    "orphans_removed": r.orphans_removed,
                })
            );
        }
        Cmd::Monitor { cid } => {
            rt.run_monitor(&cid)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("c4run: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
