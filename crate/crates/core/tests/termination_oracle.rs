// SPDX-License-Identifier: Apache-2.0

//! Termination reduction checked against an independent brute-force oracle
//! over every multiset of up to three events.

use c4_core::lifecycle::{
    is_done, reduce_termination, terminal_state_for, EventSource, LifecycleState,
    TerminationEvent, TerminationReason, DEFAULT_C_UNTRUSTED,
};
use proptest::prelude::*;

const CODES: [u8; 3] = [0, 3, 255];
const TIMES: [u64; 2] = [0, 1];

fn classes() -> Vec<(EventSource, TerminationReason)> {
    let mut v = Vec::new();
    for s in EventSource::ALL {
        for r in TerminationReason::ALL {
            if r == TerminationReason::Policy && s != EventSource::Policy {
                continue;
            }
            v.push((s, r));
        }
    }
    v
}

fn universe() -> Vec<TerminationEvent> {
    let mut v = Vec::new();
    for (s, r) in classes() {
        for c in CODES {
            for t in TIMES {
                v.push(TerminationEvent::new(s, c, r, t).unwrap());
            }
        }
    }
    v
}

// Oracle written from the dominance table, not from the library's ranking.
fn class_rank(e: &TerminationEvent) -> u8 {
    let s = match e.src() {
        EventSource::Ree => "R",
        EventSource::Tee => "T",
        EventSource::Policy => "P",
    };
    let r = format!("{:?}", e.reason()).to_lowercase();
    match (s, r.as_str()) {
        (_, "untrusted") | ("P", "policy") => 40,
        ("T", "error") => 30,
        ("R", "error") | ("P", "error") => 20,
        (_, "killed") => 10,
        (_, "normal") => 0,
        other => panic!("illegal class {other:?}"),
    }
}

fn src_pos(e: &TerminationEvent) -> u8 {
    ["P", "T", "R"]
        .iter()
        .position(|s| *s == e.src().to_string())
        .unwrap() as u8
}

fn reason_pos(e: &TerminationEvent) -> u8 {
    [
        TerminationReason::Untrusted,
        TerminationReason::Policy,
        TerminationReason::Error,
        TerminationReason::Killed,
        TerminationReason::Normal,
    ]
    .iter()
    .position(|r| *r == e.reason())
    .unwrap() as u8
}

/// `a` wins over `b`: higher class, else earlier, else P<T<R, else reason, else larger code.
fn beats(a: &TerminationEvent, b: &TerminationEvent) -> bool {
    let ka = (class_rank(a), u64::MAX - a.observed_at(), 9 - src_pos(a), 9 - reason_pos(a), a.code());
    let kb = (class_rank(b), u64::MAX - b.observed_at(), 9 - src_pos(b), 9 - reason_pos(b), b.code());
    ka >= kb
}

fn oracle(events: &[TerminationEvent]) -> (u8, LifecycleState) {
    let winner = events
        .iter()
        .find(|a| events.iter().all(|b| beats(a, b)))
        .expect("some event beats all others");
    let code = match winner.reason() {
        TerminationReason::Untrusted | TerminationReason::Policy => DEFAULT_C_UNTRUSTED,
        TerminationReason::Error => winner.code(),
        _ => 0,
    };
    let state = if (winner.src() == EventSource::Ree && winner.reason() == TerminationReason::Normal)
        || winner.reason() == TerminationReason::Killed
    {
        LifecycleState::Stopped
    } else {
        LifecycleState::Failed
    };
    (code, state)
}

fn check(events: &[TerminationEvent]) {
    let (code, dom) = reduce_termination(events, DEFAULT_C_UNTRUSTED).unwrap();
    let (ocode, ostate) = oracle(events);
    assert_eq!(code, ocode, "{events:?}");
    assert_eq!(terminal_state_for(&dom), ostate, "{events:?}");
    assert!(events.contains(&dom));
}

#[test]
fn exhaustive_multisets_up_to_three() {
    let u = universe();
    let n = u.len();
    let mut cases = 0usize;
    for i in 0..n {
        check(&[u[i]]);
        cases += 1;
        for j in i..n {
            check(&[u[i], u[j]]);
            check(&[u[j], u[i]]);
            cases += 2;
            for k in j..n {
                let (a, b, c) = (u[i], u[j], u[k]);
                for perm in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                    check(&perm);
                }
                cases += 6;
            }
        }
    }
    assert!(cases > 10_000);
}

#[test]
fn untrusted_masks_everything() {
    let u = universe();
    let bad = TerminationEvent::new(EventSource::Tee, 0, TerminationReason::Untrusted, 1).unwrap();
    for e in &u {
        let (code, dom) = reduce_termination(&[*e, bad], 99).unwrap();
        assert_eq!(code, 99);
        assert!(!is_done(&dom));
        assert_eq!(terminal_state_for(&dom), LifecycleState::Failed);
    }
}

#[test]
fn empty_is_an_error() {
    assert!(reduce_termination(&[], DEFAULT_C_UNTRUSTED).is_err());
}

fn arb_event() -> impl Strategy<Value = TerminationEvent> {
    let cls = classes();
    (0..cls.len(), any::<u8>(), 0u64..5).prop_map(move |(i, code, t)| {
        let (s, r) = cls[i];
        TerminationEvent::new(s, code, r, t).unwrap()
    })
}

proptest! {
    #[test]
    fn reduction_is_permutation_invariant(
        events in prop::collection::vec(arb_event(), 1..8),
        seed in any::<u64>(),
    ) {
        let (c1, d1) = reduce_termination(&events, DEFAULT_C_UNTRUSTED).unwrap();
        let mut shuffled = events.clone();
        let len = shuffled.len();
        let mut x = seed;
        for i in (1..len).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (x >> 33) as usize % (i + 1));
        }
        let (c2, d2) = reduce_termination(&shuffled, DEFAULT_C_UNTRUSTED).unwrap();
        prop_assert_eq!(c1, c2);
        prop_assert_eq!(d1, d2);
        prop_assert_eq!(oracle(&events), (c1, terminal_state_for(&d1)));
    }

    #[test]
    fn done_iff_ree_normal_dominates(events in prop::collection::vec(arb_event(), 1..6)) {
        let (code, dom) = reduce_termination(&events, DEFAULT_C_UNTRUSTED).unwrap();
        let any_worse = events.iter().any(|e| e.reason() != TerminationReason::Normal);
        if is_done(&dom) {
            prop_assert!(!any_worse);
            prop_assert_eq!(code, 0);
        }
    }
}
