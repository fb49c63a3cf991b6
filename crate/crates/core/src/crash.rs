// SPDX-License-Identifier: Apache-2.0

//! Named crash points for fault-injection testing.
//!
//! In-process injection makes the instrumented operation return
//! [`Crashed`] right after the named step. With `C4_CRASH_AT=<point>` set in
//! the environment the process aborts instead, which is what a real crash
//! looks like to recovery.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CRASH_ENV: &str = "C4_CRASH_AT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    CreateAfterStaging,
    CreateAfterBundle,
    CreateBeforeRename,
    AfterClaim,
    AfterAccept,
    AfterEidAlloc,
    AfterPrepare,
    AfterExecute,
    AfterRunLog,
    AfterMeta,
    AfterSummary,
    AfterResponse,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 12] = [
        CrashPoint::CreateAfterStaging,
        CrashPoint::CreateAfterBundle,
        CrashPoint::CreateBeforeRename,
        CrashPoint::AfterClaim,
        CrashPoint::AfterAccept,
        CrashPoint::AfterEidAlloc,
        CrashPoint::AfterPrepare,
        CrashPoint::AfterExecute,
        CrashPoint::AfterRunLog,
        CrashPoint::AfterMeta,
        CrashPoint::AfterSummary,
        CrashPoint::AfterResponse,
    ];

    pub const SERVE: [CrashPoint; 9] = [
        CrashPoint::AfterClaim,
        CrashPoint::AfterAccept,
        CrashPoint::AfterEidAlloc,
        CrashPoint::AfterPrepare,
        CrashPoint::AfterExecute,
        CrashPoint::AfterRunLog,
        CrashPoint::AfterMeta,
        CrashPoint::AfterSummary,
        CrashPoint::AfterResponse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CrashPoint::CreateAfterStaging => "create_after_staging",
            CrashPoint::CreateAfterBundle => "create_after_bundle",
            CrashPoint::CreateBeforeRename => "create_before_rename",
            CrashPoint::AfterClaim => "after_claim",
            CrashPoint::AfterAccept => "after_accept",
            CrashPoint::AfterEidAlloc => "after_eid_alloc",
            CrashPoint::AfterPrepare => "after_prepare",
            CrashPoint::AfterExecute => "after_execute",
            CrashPoint::AfterRunLog => "after_run_log",
            CrashPoint::AfterMeta => "after_meta",
            CrashPoint::AfterSummary => "after_summary",
            CrashPoint::AfterResponse => "after_response",
        }
    }
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrashPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CrashPoint::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown crash point {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("injected crash at {0}")]
pub struct Crashed(pub CrashPoint);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CrashInjector {
    at: Option<CrashPoint>,
    abort: bool,
}

impl CrashInjector {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn in_process(point: CrashPoint) -> Self {
        Self {
            at: Some(point),
            abort: false,
        }
    }

    /// Reads `C4_CRASH_AT`; an unknown value is ignored with a warning.
    pub fn from_env() -> Self {
        match std::env::var(CRASH_ENV) {
            Ok(v) if !v.is_empty() => match v.parse() {
                Ok(p) => Self {
                    at: Some(p),
                    abort: true,
                },
                Err(e) => {
                    log::warn!("{e}");
                    Self::none()
                }
            },
            _ => Self::none(),
        }
    }

    pub fn point(&self) -> Option<CrashPoint> {
        self.at
    }

    pub fn check(&self, here: CrashPoint) -> Result<(), Crashed> {
        if self.at != Some(here) {
            return Ok(());
        }
        if self.abort {
            log::error!("crash injected at {here}");
            std::process::abort();
        }
        Err(Crashed(here))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for p in CrashPoint::ALL {
            assert_eq!(p.as_str().parse::<CrashPoint>().unwrap(), p);
        }
    }

    #[test]
    fn fires_only_at_its_point() {
        let c = CrashInjector::in_process(CrashPoint::AfterMeta);
        assert!(c.check(CrashPoint::AfterClaim).is_ok());
        assert_eq!(c.check(CrashPoint::AfterMeta), Err(Crashed(CrashPoint::AfterMeta)));
        assert!(CrashInjector::none().check(CrashPoint::AfterMeta).is_ok());
    }
}
