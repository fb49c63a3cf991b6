// SPDX-License-Identifier: Apache-2.0

//! Append-only log of stage executions, shared across processes. Used to
//! check that no accepted request is executed more than once.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

pub const LEDGER_ENV: &str = "C4_EXEC_LEDGER";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub cid: String,
    pub eid: String,
    pub request_id: String,
    pub pid: u32,
}

#[derive(Debug, Default)]
pub struct ExecutionLedger {
    path: Option<PathBuf>,
    count: AtomicU64,
}

impl ExecutionLedger {
    pub fn new(path: Option<PathBuf>) -> Self {
        Self {
            path,
            count: AtomicU64::new(0),
        }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os(LEDGER_ENV).map(PathBuf::from))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Executions recorded by this process.
    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn record(&self, cid: &str, eid: &str, request_id: &str) -> io::Result<()> {
        self.count.fetch_add(1, Ordering::SeqCst);
        let Some(path) = &self.path else {
            return Ok(());
        };
        // one write per line; O_APPEND keeps concurrent writers from interleaving
        let line = format!("{cid} {eid} {request_id} {}\n", std::process::id());
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    pub fn read_entries(path: &Path) -> io::Result<Vec<LedgerEntry>> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        Ok(text
            .lines()
            .filter_map(|l| {
                let mut it = l.split(' ');
                Some(LedgerEntry {
                    cid: it.next()?.to_string(),
                    eid: it.next()?.to_string(),
                    request_id: it.next()?.to_string(),
                    pid: it.next()?.parse().ok()?,
                })
            })
            .collect())
    }
}
