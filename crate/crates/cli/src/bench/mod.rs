// SPDX-License-Identifier: Apache-2.0

//! Benchmark and audit harness. Rounds drive the real binaries as child
//! processes; audits read the state directory afterwards.

pub mod adversary;
pub mod audit;
pub mod campaign;
pub mod cycle;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

/// Paths of the binaries the harness launches.
#[derive(Debug, Clone)]
pub struct Tools {
    pub c4run: PathBuf,
    pub anchor: PathBuf,
}

impl Tools {
    /// Binaries installed next to the running executable.
    pub fn beside_current_exe() -> io::Result<Self> {
        let exe = std::env::current_exe()?;
        let dir = exe
            .parent()
            .ok_or_else(|| io::Error::other("executable has no parent directory"))?;
        Ok(Self {
            c4run: dir.join("c4run"),
            anchor: dir.join("c4-anchor"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    Localexec,
}

impl BackendKind {
    pub fn id(self) -> &'static str {
        match self {
            BackendKind::Sim => "sim",
            BackendKind::Localexec => "localexec",
        }
    }
}

/// Delay of the `nap` stage.
pub const NAP_MS: u64 = 20;
/// Exit code of the `fail` stage.
pub const FAIL_RC: i32 = 7;

const HELLO_SH: &str = "#!/bin/sh\necho \"hello from $C4_EID\"\n";
const FAIL_SH: &str = "#!/bin/sh\necho \"failing $C4_EID\" >&2\nexit 7\n";

/// Writes a bundle whose anchor is the reference anchor run with
/// `anchor_args`. Stages `hello`, `fail` and `nap` exist for both backends;
/// the simulator also gets `aes`.
pub fn write_bundle(
    dir: &Path,
    tools: &Tools,
    backend: BackendKind,
    anchor_args: &[String],
) -> io::Result<PathBuf> {
    let bin = dir.join("rootfs/bin");
    fs::create_dir_all(&bin)?;
    let anchor = bin.join("c4-anchor");
    if !anchor.exists() {
        fs::copy(&tools.anchor, &anchor)?;
    }
    let stages = match backend {
        BackendKind::Sim => json!({
            "hello": {"behavior": "hello"},
            "aes": {"behavior": "aesgcm", "bytes": 4096},
            "fail": {"behavior": "fail", "rc": FAIL_RC},
            "nap": {"behavior": "sleep", "delay_ms": NAP_MS},
        }),
        BackendKind::Localexec => {
            let stage_dir = dir.join("rootfs/stages");
            fs::create_dir_all(&stage_dir)?;
            let nap = format!("#!/bin/sh\nsleep {}\necho \"napped $C4_EID\"\n", NAP_MS as f64 / 1000.0);
            for (name, body) in [("hello.sh", HELLO_SH), ("fail.sh", FAIL_SH), ("nap.sh", nap.as_str())] {
                let p = stage_dir.join(name);
                fs::write(&p, body)?;
                set_executable(&p)?;
            }
            json!({
                "hello": {"program": "/stages/hello.sh"},
                "fail": {"program": "/stages/fail.sh"},
                "nap": {"program": "/stages/nap.sh"},
            })
        }
    };
    let mut args = vec!["/bin/c4-anchor".to_string()];
    args.extend(anchor_args.iter().cloned());
    let config = json!({
        "ociVersion": "1.0.2",
        "process": {"args": args, "cwd": "/"},
        "root": {"path": "rootfs"},
        "c4": {"backend_id": backend.id(), "stage_table": stages},
    });
    fs::write(
        dir.join("config.json"),
        serde_json::to_vec_pretty(&config).expect("config serializes"),
    )?;
    Ok(dir.to_path_buf())
}

fn set_executable(p: &Path) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(p, fs::Permissions::from_mode(0o755))
}

/// Anchor arguments for `stages` issued with at most `concurrency`
/// outstanding.
pub fn anchor_args(stages: &[&str], concurrency: usize) -> Vec<String> {
    let mut v = vec!["--concurrency".to_string(), concurrency.to_string()];
    if !stages.is_empty() {
        v.push("--stages".into());
        v.push(stages.join(","));
    } else {
        v.push("--count".into());
        v.push("0".into());
    }
    v
}

/// Median, 95th percentile and mean of `xs`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Self {
            median: rank(0.5),
            p95: rank(0.95),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_small_sets() {
        let s = Summary::of(&[3.0, 1.0, 2.0]);
        assert_eq!((s.median, s.p95, s.mean), (2.0, 3.0, 2.0));
        assert_eq!(Summary::of(&[]), Summary::default());
    }

    #[test]
    fn anchor_args_shape() {
        assert_eq!(
            anchor_args(&["hello", "aes"], 2),
            ["--concurrency", "2", "--stages", "hello,aes"]
        );
        assert_eq!(anchor_args(&[], 1), ["--concurrency", "1", "--count", "0"]);
    }
}
