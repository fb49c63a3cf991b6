// SPDX-License-Identifier: Apache-2.0

//! Correctness, concurrency and crash campaigns built from rounds.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use c4_core::backend::RC_RECOVERY_AMBIGUOUS;
use c4_core::crash::CrashPoint;
use c4_core::lifecycle::LifecycleState;
use serde::{Deserialize, Serialize};

use super::cycle::{run_round, throughput, RoundOptions, RoundReport};
use super::{anchor_args, write_bundle, BackendKind, Summary, Tools};

/// Where a campaign keeps bundles, state directories and ledgers.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub tools: Tools,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(tools: Tools, dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            tools,
            dir: dir.to_path_buf(),
        })
    }

    fn statedir_root(&self) -> PathBuf {
        self.dir.join("state")
    }

    fn bundle(&self, name: &str, backend: BackendKind, args: &[String]) -> io::Result<PathBuf> {
        write_bundle(&self.dir.join(format!("bundle-{name}")), &self.tools, backend, args)
    }

    fn ledger(&self, name: &str) -> io::Result<PathBuf> {
        let p = self.dir.join(format!("{name}.ledger"));
        if p.exists() {
            fs::remove_file(&p)?;
        }
        Ok(p)
    }
}

/// Table-1 style aggregate over rounds. Rates are fractions in [0, 1].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rounds: usize,
    pub wcr: f64,
    pub csr: f64,
    pub scr: f64,
    pub ipr: f64,
    pub commands: usize,
    pub commands_ok: usize,
}

impl Aggregate {
    pub fn of(rounds: &[RoundReport]) -> Self {
        let n = rounds.len();
        let rate = |c: usize| if n == 0 { 1.0 } else { c as f64 / n as f64 };
        let commands: usize = rounds.iter().map(|r| r.commands.len()).sum();
        let commands_ok: usize = rounds
            .iter()
            .map(|r| r.commands.iter().filter(|c| c.ok()).count())
            .sum();
        Self {
            rounds: n,
            wcr: rate(rounds.iter().filter(|r| r.completed()).count()),
            csr: if commands == 0 {
                1.0
            } else {
                commands_ok as f64 / commands as f64
            },
            scr: rate(rounds.iter().filter(|r| r.scr.pass()).count()),
            ipr: rate(rounds.iter().filter(|r| r.artifacts_ok()).count()),
            commands,
            commands_ok,
        }
    }

    pub fn perfect(&self) -> bool {
        self.wcr == 1.0 && self.csr == 1.0 && self.scr == 1.0 && self.ipr == 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub name: String,
    pub backend: BackendKind,
    pub aggregate: Aggregate,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone)]
pub struct CorrectnessOptions {
    pub rounds: usize,
    pub stages: Vec<String>,
    pub backend: BackendKind,
    pub serve_instances: usize,
    pub reuse_bundle: bool,
    /// Expected terminal state and exit code of every round.
    pub expect: (LifecycleState, u8),
}

impl Default for CorrectnessOptions {
    fn default() -> Self {
        Self {
            rounds: 100,
            stages: vec!["hello".into(); 4],
            backend: BackendKind::Sim,
            serve_instances: 1,
            reuse_bundle: false,
            expect: (LifecycleState::Stopped, 0),
        }
    }
}

/// Full-cycle rounds. With several serve instances every round also gets
/// the exactly-once audit against a shared execution ledger.
pub fn run_correctness(ws: &Workspace, o: &CorrectnessOptions) -> io::Result<CampaignReport> {
    let stages: Vec<&str> = o.stages.iter().map(String::as_str).collect();
    let concurrency = if o.serve_instances > 1 { stages.len().max(1) } else { 1 };
    let name = format!("correctness-{}-{}", o.backend.id(), o.serve_instances);
    let bundle = ws.bundle(&name, o.backend, &anchor_args(&stages, concurrency))?;
    let ledger = ws.ledger(&name)?;
    let mut rounds = Vec::with_capacity(o.rounds);
    for i in 0..o.rounds {
        let mut ro = RoundOptions::new(format!("{name}-{i}"), &bundle, &ws.statedir_root());
        ro.serve_instances = o.serve_instances;
        ro.reuse_bundle = o.reuse_bundle;
        ro.ledger = Some(ledger.clone());
        ro.expect = o.expect;
        rounds.push(run_round(&ws.tools, &ro, i));
    }
    Ok(CampaignReport {
        name,
        backend: o.backend,
        aggregate: Aggregate::of(&rounds),
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcurrencyRow {
    pub k: usize,
    pub rounds: usize,
    pub elapsed_s: Summary,
    pub throughput: Summary,
    /// Completed stages over issued stages.
    pub success_rate: f64,
    pub exactly_once: bool,
    /// Per-round `(elapsed_s, throughput)` as reported.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcurrencyReport {
    pub rows: Vec<ConcurrencyRow>,
    pub rounds: Vec<RoundReport>,
}

/// Issues `k` concurrent `nap` stages per round, served by
/// `serve_instances` processes with `k` workers in total.
pub fn run_concurrency(
    ws: &Workspace,
    k_values: &[usize],
    rounds_per_k: usize,
    serve_instances: usize,
    backend: BackendKind,
) -> io::Result<ConcurrencyReport> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &k in k_values {
        let name = format!("concurrency-{}-k{k}", backend.id());
        let stages = vec!["nap"; k];
        let bundle = ws.bundle(&name, backend, &anchor_args(&stages, k))?;
        let ledger = ws.ledger(&name)?;
        let mut rounds = Vec::new();
        for i in 0..rounds_per_k {
            let mut ro = RoundOptions::new(format!("{name}-{i}"), &bundle, &ws.statedir_root());
            ro.serve_instances = serve_instances;
            ro.workers = k.div_ceil(serve_instances.max(1));
            ro.ledger = Some(ledger.clone());
            ro.reuse_bundle = true;
            rounds.push(run_round(&ws.tools, &ro, i));
        }
        let issued = k * rounds.len();
        let completed: usize = rounds.iter().filter_map(|r| r.anchor.as_ref()).map(|a| a.completed).sum();
        let samples: Vec<(f64, f64)> = rounds.iter().map(|r| (r.elapsed_s, r.throughput)).collect();
        rows.push(ConcurrencyRow {
            k,
            rounds: rounds.len(),
            elapsed_s: Summary::of(&samples.iter().map(|s| s.0).collect::<Vec<_>>()),
            throughput: Summary::of(&samples.iter().map(|s| s.1).collect::<Vec<_>>()),
            success_rate: if issued == 0 { 1.0 } else { completed as f64 / issued as f64 },
            exactly_once: rounds
                .iter()
                .all(|r| r.artifacts_ok() && r.completed() && r.exactly_once.as_ref().is_some_and(|e| e.pass())),
            samples,
        });
        all.extend(rounds);
    }
    Ok(ConcurrencyReport { rows, rounds: all })
}

/// True when every row's throughput equals `k / elapsed_s` recomputed.
pub fn throughput_recomputes(r: &ConcurrencyReport) -> bool {
    r.rounds.iter().all(|x| x.throughput == throughput(x.k, x.elapsed_s))
        && r.rows.iter().all(|row| {
            row.samples
                .iter()
                .all(|(e, t)| *t == throughput(row.k, *e))
        })
}

/// Crash points whose stage may have run before the crash, so recovery
/// reports it ambiguous and the anchor sees a failed stage.
pub fn crash_is_ambiguous(p: CrashPoint) -> bool {
    matches!(p, CrashPoint::AfterExecute | CrashPoint::AfterRunLog)
}

/// One round per crash point: the crashing process aborts, is recovered
/// (`recover`, or a second `create`), and the round then runs to the end.
pub fn run_crash(ws: &Workspace, points: &[CrashPoint], backend: BackendKind) -> io::Result<CampaignReport> {
    let name = format!("crash-{}", backend.id());
    let bundle = ws.bundle(&name, backend, &anchor_args(&["hello"; 4], 1))?;
    let ledger = ws.ledger(&name)?;
    let mut rounds = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        let mut ro = RoundOptions::new(format!("{name}-{}", p.as_str().replace('_', "-")), &bundle, &ws.statedir_root());
        ro.ledger = Some(ledger.clone());
        if CrashPoint::SERVE.contains(&p) {
            ro.crash_serve = Some(p);
        } else {
            ro.crash_create = Some(p);
        }
        if crash_is_ambiguous(p) {
            // fail-fast reports the ambiguous stage's rc as a TEE error
            ro.expect = (LifecycleState::Failed, RC_RECOVERY_AMBIGUOUS as u8);
        }
        rounds.push(run_round(&ws.tools, &ro, i));
    }
    Ok(CampaignReport {
        name,
        backend,
        aggregate: Aggregate::of(&rounds),
        rounds,
    })
}
