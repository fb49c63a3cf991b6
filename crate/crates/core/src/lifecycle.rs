// SPDX-License-Identifier: Apache-2.0

//! CID-level lifecycle: the state machine, its OCI projection, the reduction
//! of termination events to a single exit code, and the derived
//! observability/readiness flags.
//!
//! Everything here is pure. Persistence lives in [`crate::store`].

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default exit code reported when the dominant termination event is a trust
/// or policy violation.
pub const DEFAULT_C_UNTRUSTED: u8 = 252;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("termination reduction needs at least one event")]
    NoEvents,
    #[error("reason `policy` is only valid for source P, got {0}")]
    PolicyFromNonPolicySource(EventSource),
}

/// Internal lifecycle state of a composite instance.
///
/// `Init` is never persisted; it is the absence of a state record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleState {
    Init,
    Prepared,
    Running,
    Stopped,
    Failed,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 5] = [
        LifecycleState::Init,
        LifecycleState::Prepared,
        LifecycleState::Running,
        LifecycleState::Stopped,
        LifecycleState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, LifecycleState::Stopped | LifecycleState::Failed)
    }
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The externally visible OCI status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OciStatus {
    Created,
    Running,
    Stopped,
}

impl OciStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OciStatus::Created => "created",
            OciStatus::Running => "running",
            OciStatus::Stopped => "stopped",
        }
    }
}

/// Projects an internal state onto the OCI-visible status.
pub fn project_oci(state: LifecycleState) -> OciStatus {
    match state {
        LifecycleState::Init | LifecycleState::Prepared => OciStatus::Created,
        LifecycleState::Running => OciStatus::Running,
        LifecycleState::Stopped | LifecycleState::Failed => OciStatus::Stopped,
    }
}

/// Whether `from -> to` is a legal record update.
///
/// Reflexive edges are accepted as idempotent re-assertions. Deletion is not a
/// record update, so no edge leads back to `Init`.
pub fn validate_transition(from: LifecycleState, to: LifecycleState) -> bool {
    use LifecycleState::*;
    if from == to {
        return true;
    }
    matches!(
        (from, to),
        (Init, Prepared)
            | (Prepared, Running)
            | (Prepared, Stopped)
            | (Prepared, Failed)
            | (Running, Stopped)
            | (Running, Failed)
    )
}

/// Origin of a termination event: REE anchor, TEE stage, or policy/runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventSource {
    #[serde(rename = "R")]
    Ree,
    #[serde(rename = "T")]
    Tee,
    #[serde(rename = "P")]
    Policy,
}

impl EventSource {
    pub const ALL: [EventSource; 3] = [EventSource::Ree, EventSource::Tee, EventSource::Policy];

    // tie-break order: P before T before R
    fn tie_rank(self) -> u8 {
        match self {
            EventSource::Policy => 0,
            EventSource::Tee => 1,
            EventSource::Ree => 2,
        }
    }
}

impl fmt::Display for EventSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventSource::Ree => "R",
            EventSource::Tee => "T",
            EventSource::Policy => "P",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminationReason {
    Normal,
    Error,
    Untrusted,
    Killed,
    Policy,
}

impl TerminationReason {
    pub const ALL: [TerminationReason; 5] = [
        TerminationReason::Normal,
        TerminationReason::Error,
        TerminationReason::Untrusted,
        TerminationReason::Killed,
        TerminationReason::Policy,
    ];
}

/// A termination-related observation `<src, code, reason>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TerminationEvent {
    src: EventSource,
    code: u8,
    reason: TerminationReason,
    observed_at: u64,
}

impl TerminationEvent {
    pub fn new(
        src: EventSource,
        code: u8,
        reason: TerminationReason,
        observed_at: u64,
    ) -> Result<Self, LifecycleError> {
        if reason == TerminationReason::Policy && src != EventSource::Policy {
            return Err(LifecycleError::PolicyFromNonPolicySource(src));
        }
        Ok(Self {
            src,
            code,
            reason,
            observed_at,
        })
    }

    pub fn src(&self) -> EventSource {
        self.src
    }

    pub fn code(&self) -> u8 {
        self.code
    }

    pub fn reason(&self) -> TerminationReason {
        self.reason
    }

    pub fn observed_at(&self) -> u64 {
        self.observed_at
    }

    /// Dominance class: untrusted/policy > TEE-error > REE-error > killed > normal.
    ///
    /// An error raised by the policy controller itself ranks with REE errors,
    /// both being host-side failures.
    pub fn severity(&self) -> u8 {
        use TerminationReason as R;
        match (self.src, self.reason) {
            (_, R::Untrusted) | (_, R::Policy) => 4,
            (EventSource::Tee, R::Error) => 3,
            (_, R::Error) => 2,
            (_, R::Killed) => 1,
            (_, R::Normal) => 0,
        }
    }

    fn reason_rank(&self) -> u8 {
        match self.reason {
            TerminationReason::Untrusted => 0,
            TerminationReason::Policy => 1,
            TerminationReason::Error => 2,
            TerminationReason::Killed => 3,
            TerminationReason::Normal => 4,
        }
    }

    /// Total order where `Ordering::Greater` means "dominates".
    ///
    /// Ties inside a severity class go to the earliest observation, then to
    /// source P before T before R. The remaining keys only exist to make the
    /// order total so the result never depends on input order.
    pub fn dominance_cmp(&self, other: &Self) -> Ordering {
        self.severity()
            .cmp(&other.severity())
            .then_with(|| other.observed_at.cmp(&self.observed_at))
            .then_with(|| other.src.tie_rank().cmp(&self.src.tie_rank()))
            .then_with(|| other.reason_rank().cmp(&self.reason_rank()))
            .then_with(|| self.code.cmp(&other.code))
    }
}

/// Reduces the observed termination events to `(exit_code, dominant)`.
pub fn reduce_termination(
    events: &[TerminationEvent],
    c_untrusted: u8,
) -> Result<(u8, TerminationEvent), LifecycleError> {
    let dominant = *events
        .iter()
        .max_by(|a, b| a.dominance_cmp(b))
        .ok_or(LifecycleError::NoEvents)?;
    Ok((exit_code_for(&dominant, c_untrusted), dominant))
}

fn exit_code_for(event: &TerminationEvent, c_untrusted: u8) -> u8 {
    match event.reason {
        TerminationReason::Untrusted | TerminationReason::Policy => c_untrusted,
        TerminationReason::Error => event.code,
        TerminationReason::Normal | TerminationReason::Killed => 0,
    }
}

/// Normal completion is anchored at the REE anchor.
pub fn is_done(dominant: &TerminationEvent) -> bool {
    dominant.src == EventSource::Ree && dominant.reason == TerminationReason::Normal
}

/// Terminal state recorded for a dominant event: `Stopped` for normal
/// completion or a user kill, `Failed` otherwise.
pub fn terminal_state_for(dominant: &TerminationEvent) -> LifecycleState {
    if is_done(dominant) || dominant.reason == TerminationReason::Killed {
        LifecycleState::Stopped
    } else {
        LifecycleState::Failed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrustFlag {
    Trusted,
    Untrusted,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HealthFlag {
    Healthy,
    Degraded,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeePhase {
    #[default]
    Idle,
    Active,
    Error,
}

/// Trust evidence: attestation, measurement digest and binding outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustEvidence {
    pub attestation: Option<bool>,
    pub measurement: Option<String>,
    pub binding: Option<bool>,
}

impl TrustEvidence {
    pub fn is_complete(&self) -> bool {
        self.attestation.is_some() && self.measurement.is_some() && self.binding.is_some()
    }
}

/// Health observations. `None` means not observed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HealthEvidence {
    pub dependencies_ok: Option<bool>,
    pub resources_ok: Option<bool>,
    pub performance_ok: Option<bool>,
}

/// Stage activity: in-flight calls, observed timeouts and last exit outcome.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TeeEvidence {
    pub in_flight: u32,
    pub timeouts: u32,
    pub exit_failed: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObservabilityEvidence {
    pub trust: TrustEvidence,
    pub health: HealthEvidence,
    pub tee: TeeEvidence,
}

/// Default trust policy: every trust input present and the binding check passed.
pub fn default_trust_policy(evidence: &TrustEvidence) -> bool {
    evidence.is_complete() && evidence.binding == Some(true)
}

pub fn evaluate_observability<P>(
    evidence: &ObservabilityEvidence,
    policy: P,
) -> (TrustFlag, HealthFlag, TeePhase)
where
    P: Fn(&TrustEvidence) -> bool,
{
    let trust = if !evidence.trust.is_complete() {
        TrustFlag::Unknown
    } else if policy(&evidence.trust) {
        TrustFlag::Trusted
    } else {
        TrustFlag::Untrusted
    };

    let h = &evidence.health;
    let health = match (h.dependencies_ok, h.resources_ok, h.performance_ok) {
        (Some(true), Some(true), Some(true)) => HealthFlag::Healthy,
        (Some(_), Some(_), Some(_)) => HealthFlag::Degraded,
        _ => HealthFlag::Unknown,
    };

    let t = &evidence.tee;
    let tee = if t.exit_failed == Some(true) || t.timeouts > 0 {
        TeePhase::Error
    } else if t.in_flight > 0 {
        TeePhase::Active
    } else {
        TeePhase::Idle
    };

    (trust, health, tee)
}

/// Readiness as a derived predicate. Never true outside `Running`.
pub fn evaluate_readiness(
    state: LifecycleState,
    trust: TrustFlag,
    prepared_r: bool,
    prepared_t: bool,
    require_conf: bool,
) -> bool {
    if state != LifecycleState::Running || !prepared_r {
        return false;
    }
    if require_conf {
        prepared_t && trust == TrustFlag::Trusted
    } else {
        true
    }
}
