// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use c4run::anchor::{self, Workload, EXIT_SETUP};
use clap::Parser;

/// Reference anchor. Reads C4_STATEDIR and C4_SESSION_PATH from the
/// environment set by the runtime.
#[derive(Parser)]
#[command(name = "c4-anchor")]
struct Args {
    /// Comma-separated stage names.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    delay_ms: Option<u64>,
    #[arg(long)]
    payload: Option<String>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// JSON workload file; flags override its fields.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Stay resident after the workload until signalled.
    #[arg(long)]
    linger: bool,
    /// While lingering, exit with the code written to `<dir>/<cid>.exit`.
    #[arg(long)]
    control_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_SETUP as u8);
        }
    };
    let env = |k: &str| std::env::var_os(k).map(PathBuf::from);
    let (Some(statedir), Some(session)) = (env("C4_STATEDIR"), env("C4_SESSION_PATH")) else {
        eprintln!("c4-anchor: C4_STATEDIR and C4_SESSION_PATH must be set");
        return ExitCode::from(EXIT_SETUP as u8);
    };
    let cid = std::env::var("C4_CID").unwrap_or_default();

    let mut w: Workload = match &args.workload {
        Some(p) => match std::fs::read(p).map(|b| serde_json::from_slice(&b)) {
            Ok(Ok(w)) => w,
            Ok(Err(e)) => {
                eprintln!("c4-anchor: {}: {e}", p.display());
                return ExitCode::from(EXIT_SETUP as u8);
            }
            Err(e) => {
                eprintln!("c4-anchor: {}: {e}", p.display());
                return ExitCode::from(EXIT_SETUP as u8);
            }
        },
        None => serde_json::from_str(r#"{"stages":[]}"#).expect("empty workload"),
    };
    if !args.stages.is_empty() {
        w.stages = args.stages;
    }
    if args.count.is_some() {
        w.count = args.count;
    }
    w.concurrency = args.concurrency.unwrap_or(w.concurrency);
    w.delay_ms = args.delay_ms.unwrap_or(w.delay_ms);
    w.payload = args.payload.unwrap_or(w.payload);
    w.timeout_ms = args.timeout_ms.unwrap_or(w.timeout_ms);

    let out = anchor::run(&statedir, &session, &w);
    println!("{}", serde_json::to_string(&out.report).expect("report serializes"));
    if let Some(e) = &out.error {
        eprintln!("c4-anchor: {e}");
    }
    if out.exit_code != 0 || !args.linger {
        return ExitCode::from(out.exit_code as u8);
    }
    loop {
        if let Some(dir) = &args.control_dir {
            // a half-written file reads as empty; poll again
            let s = std::fs::read_to_string(dir.join(format!("{cid}.exit"))).unwrap_or_default();
            if let Ok(code) = s.trim().parse::<u8>() {
                return ExitCode::from(code);
            }
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}
