// SPDX-License-Identifier: Apache-2.0

use c4_core::lifecycle::{
    default_trust_policy, evaluate_observability, evaluate_readiness, project_oci,
    validate_transition, HealthEvidence, HealthFlag, LifecycleState, ObservabilityEvidence,
    OciStatus, TeeEvidence, TeePhase, TrustEvidence, TrustFlag,
};
use proptest::prelude::*;

fn arb_state() -> impl Strategy<Value = LifecycleState> {
    prop::sample::select(LifecycleState::ALL.to_vec())
}

fn arb_trust() -> impl Strategy<Value = TrustFlag> {
    prop::sample::select(vec![TrustFlag::Trusted, TrustFlag::Untrusted, TrustFlag::Unknown])
}

fn oci_rank(s: OciStatus) -> u8 {
    match s {
        OciStatus::Created => 0,
        OciStatus::Running => 1,
        OciStatus::Stopped => 2,
    }
}

#[test]
fn legal_edges_match_the_dag() {
    use LifecycleState::*;
    let legal = [
        (Init, Prepared),
        (Prepared, Running),
        (Prepared, Stopped),
        (Prepared, Failed),
        (Running, Stopped),
        (Running, Failed),
    ];
    for a in LifecycleState::ALL {
        for b in LifecycleState::ALL {
            let expected = a == b || legal.contains(&(a, b));
            assert_eq!(validate_transition(a, b), expected, "{a:?} -> {b:?}");
        }
    }
}

proptest! {
    #[test]
    fn oci_status_never_regresses(walk in prop::collection::vec(arb_state(), 1..20)) {
        let mut cur = LifecycleState::Init;
        for next in walk {
            if validate_transition(cur, next) {
                prop_assert!(oci_rank(project_oci(next)) >= oci_rank(project_oci(cur)));
                cur = next;
            }
        }
    }

    #[test]
    fn terminal_states_are_absorbing(s in arb_state(), t in arb_state()) {
        if s.is_terminal() && s != t {
            prop_assert!(!validate_transition(s, t));
        }
    }

    #[test]
    fn projection_is_total_and_fixed(s in arb_state()) {
        let expected = match s {
            LifecycleState::Init | LifecycleState::Prepared => OciStatus::Created,
            LifecycleState::Running => OciStatus::Running,
            _ => OciStatus::Stopped,
        };
        prop_assert_eq!(project_oci(s), expected);
    }

    #[test]
    fn ready_implies_running(
        s in arb_state(),
        trust in arb_trust(),
        pr in any::<bool>(),
        pt in any::<bool>(),
        rc in any::<bool>(),
    ) {
        let ready = evaluate_readiness(s, trust, pr, pt, rc);
        if ready {
            prop_assert_eq!(s, LifecycleState::Running);
            prop_assert!(pr);
            if rc {
                prop_assert!(pt);
                prop_assert_eq!(trust, TrustFlag::Trusted);
            }
        }
        if s == LifecycleState::Running && pr && (!rc || (pt && trust == TrustFlag::Trusted)) {
            prop_assert!(ready);
        }
    }

    #[test]
    fn missing_trust_evidence_is_unknown(
        att in prop::option::of(any::<bool>()),
        meas in prop::option::of("[a-f0-9]{8}"),
        bind in prop::option::of(any::<bool>()),
    ) {
        let ev = ObservabilityEvidence {
            trust: TrustEvidence { attestation: att, measurement: meas.clone(), binding: bind },
            ..Default::default()
        };
        let (trust, _, _) = evaluate_observability(&ev, default_trust_policy);
        let complete = att.is_some() && meas.is_some() && bind.is_some();
        if !complete {
            prop_assert_eq!(trust, TrustFlag::Unknown);
        } else if bind == Some(true) {
            prop_assert_eq!(trust, TrustFlag::Trusted);
        } else {
            prop_assert_eq!(trust, TrustFlag::Untrusted);
        }
        // an always-yes policy still cannot produce trusted from partial evidence
        let (lenient, _, _) = evaluate_observability(&ev, |_| true);
        if !complete {
            prop_assert_eq!(lenient, TrustFlag::Unknown);
        }
    }

    #[test]
    fn health_and_phase_tables(
        d in prop::option::of(any::<bool>()),
        r in prop::option::of(any::<bool>()),
        p in prop::option::of(any::<bool>()),
        in_flight in 0u32..3,
        timeouts in 0u32..2,
        exit_failed in prop::option::of(any::<bool>()),
    ) {
        let ev = ObservabilityEvidence {
            health: HealthEvidence { dependencies_ok: d, resources_ok: r, performance_ok: p },
            tee: TeeEvidence { in_flight, timeouts, exit_failed },
            ..Default::default()
        };
        let (_, health, phase) = evaluate_observability(&ev, default_trust_policy);
        let expected_health = match (d, r, p) {
            (Some(true), Some(true), Some(true)) => HealthFlag::Healthy,
            (Some(_), Some(_), Some(_)) => HealthFlag::Degraded,
            _ => HealthFlag::Unknown,
        };
        prop_assert_eq!(health, expected_health);
        let expected_phase = if exit_failed == Some(true) || timeouts > 0 {
            TeePhase::Error
        } else if in_flight > 0 {
            TeePhase::Active
        } else {
            TeePhase::Idle
        };
        prop_assert_eq!(phase, expected_phase);
    }
}
