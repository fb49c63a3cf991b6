// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use c4_core::crash::CrashPoint;
use c4run::bench::adversary::{run_adversary, AdversaryOptions};
use c4run::bench::campaign::{
    run_concurrency, run_correctness, run_crash, throughput_recomputes, CampaignReport,
    CorrectnessOptions, Workspace,
};
use c4run::bench::{BackendKind, Tools};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "c4bench", about = "Correctness, concurrency, adversary and crash campaigns")]
struct Cli {
    /// Scratch directory for bundles and state.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Write the JSON report here as well as printing the summary.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Backend::Sim)]
    backend: Backend,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Sim,
    Localexec,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Sim => BackendKind::Sim,
            Backend::Localexec => BackendKind::Localexec,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Full lifecycle rounds with WCR/CSR/SCR/IPR.
    Correctness {
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        #[arg(long, value_delimiter = ',', default_value = "hello,hello,hello,hello")]
        stages: Vec<String>,
        #[arg(long, default_value_t = 1)]
        serve_instances: usize,
        #[arg(long)]
        reuse_bundle: bool,
    },
    /// k concurrent stages per round.
    Concurrency {
        #[arg(long, value_delimiter = ',', default_value = "2,5,8,16,32")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        #[arg(long, default_value_t = 1)]
        serve_instances: usize,
    },
    /// Replayed, misrouted, rolled-back and corrupted requests.
    Adversary {
        #[arg(long, default_value_t = 500)]
        honest_per_cid: usize,
        #[arg(long, default_value_t = 0xc4)]
        seed: u64,
    },
    /// One round per crash point, recovered.
    Crash {
        /// Crash points; all when omitted.
        #[arg(long, value_delimiter = ',')]
        points: Vec<String>,
    },
}

fn print_campaign(r: &CampaignReport) {
    let a = &r.aggregate;
    println!("{:<32} {:>6} {:>7} {:>7} {:>7} {:>7}", "campaign", "rounds", "WCR", "CSR", "SCR", "IPR");
    println!(
        "{:<32} {:>6} {:>6.1}% {:>6.1}% {:>6.1}% {:>6.1}%",
        r.name,
        a.rounds,
        a.wcr * 100.0,
        a.csr * 100.0,
        a.scr * 100.0,
        a.ipr * 100.0
    );
    println!("(CSR counts an expected nonzero exit as success)");
    for round in r.rounds.iter().filter(|x| !x.completed() || !x.artifacts_ok() || !x.scr.pass()) {
        println!("  round {} ({}) failed:", round.round, round.cid);
        for c in round.commands.iter().filter(|c| !c.ok()) {
            println!("    {} exited {} (expected {}) {}", c.command, c.status, c.expected, c.stderr.trim());
        }
        for v in round.ipr.violations.iter().chain(&round.scr.violations) {
            println!("    {} {}: {}", v.subject, v.predicate, v.detail);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let tools = Tools::beside_current_exe().context("locating c4run")?;
    let dir = cli
        .workdir
        .unwrap_or_else(|| std::env::temp_dir().join(format!("c4bench-{}", std::process::id())));
    let ws = Workspace::new(tools, &dir)?;
    let backend: BackendKind = cli.backend.into();
    let (ok, json) = match cli.cmd {
        Cmd::Correctness {
            rounds,
            stages,
            serve_instances,
            reuse_bundle,
        } => {
            let r = run_correctness(
                &ws,
                &CorrectnessOptions {
                    rounds,
                    stages,
                    backend,
                    serve_instances,
                    reuse_bundle,
                    ..Default::default()
                },
            )?;
            print_campaign(&r);
            (r.aggregate.perfect(), serde_json::to_value(&r)?)
        }
        Cmd::Concurrency {
            k,
            rounds,
            serve_instances,
        } => {
            let r = run_concurrency(&ws, &k, rounds, serve_instances, backend)?;
            println!(
                "{:>4} {:>6} {:>10} {:>10} {:>10} {:>12} {:>12} {:>12} {:>8}",
                "k", "rounds", "el_med_s", "el_p95_s", "el_mean_s", "tp_med", "tp_p95", "tp_mean", "success"
            );
            for row in &r.rows {
                println!(
                    "{:>4} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>12.2} {:>12.2} {:>12.2} {:>7.1}%",
                    row.k,
                    row.rounds,
                    row.elapsed_s.median,
                    row.elapsed_s.p95,
                    row.elapsed_s.mean,
                    row.throughput.median,
                    row.throughput.p95,
                    row.throughput.mean,
                    row.success_rate * 100.0
                );
            }
            let ok = throughput_recomputes(&r)
                && r.rows.iter().all(|x| x.success_rate == 1.0 && x.exactly_once);
            (ok, serde_json::to_value(&r)?)
        }
        Cmd::Adversary {
            honest_per_cid,
            seed,
        } => {
            let r = run_adversary(&ws, &AdversaryOptions { honest_per_cid, seed })?;
            println!(
                "adversarial {} accepted {} executed {}; honest {} rejected {}",
                r.adversarial, r.adversarial_accepted, r.adversarial_executions, r.honest, r.honest_rejected
            );
            for (kind, k) in &r.by_kind {
                println!("  {kind:<16} {:>6} {:?}", k.cases, k.reasons);
            }
            for e in &r.errors {
                println!("  error: {e}");
            }
            (r.pass(), serde_json::to_value(&r)?)
        }
        Cmd::Crash { points } => {
            let points = if points.is_empty() {
                CrashPoint::ALL.to_vec()
            } else {
                points
                    .iter()
                    .map(|p| p.parse::<CrashPoint>().map_err(|e| anyhow::anyhow!("{e}")))
                    .collect::<anyhow::Result<Vec<_>>>()?
            };
            let r = run_crash(&ws, &points, backend)?;
            print_campaign(&r);
            (r.aggregate.perfect(), serde_json::to_value(&r)?)
        }
    };
    if let Some(p) = cli.report {
        std::fs::write(&p, serde_json::to_vec_pretty(&json)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ok)
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
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("c4bench: {e:#}");
            ExitCode::from(2)
        }
    }
}
