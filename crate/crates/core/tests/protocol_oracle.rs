// SPDX-License-Identifier: Apache-2.0

//! Stage protocol checked against a second, hand-rolled HMAC-SHA256 and a
//! hand-built canonical encoding, plus tamper fuzzing.

use std::path::Path;

use c4_core::protocol::{
    build_response, validate_request, verify_response, RejectReason, ResponseStatus, SessionKey,
    SessionState,
};
use proptest::prelude::*;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

fn hmac_oracle(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

#[test]
fn oracle_matches_rfc4231() {
    // test case 1
    assert_eq!(
        hex::encode(hmac_oracle(&[0x0b; 20], b"Hi There")),
        "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
    );
    // test case 2
    assert_eq!(
        hex::encode(hmac_oracle(b"Jefe", b"what do ya want for nothing?")),
        "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
    );
    // test case 6, key longer than the block
    assert_eq!(
        hex::encode(hmac_oracle(
            &[0xaa; 131],
            b"Test Using Larger Than Block-Size Key - Hash Key First"
        )),
        "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54"
    );
}

fn lp(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

#[test]
fn request_tag_matches_hand_built_encoding() {
    let sk = SessionKey::new([0x42; 32]);
    let mut s = SessionState::new("cid-x", sk.clone());
    s.advance_epoch();
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let r = s.build_request_with("hello", b"payload", &mut rng);

    let mut canon = b"C4REQ\x01".to_vec();
    lp(&mut canon, b"hello");
    lp(&mut canon, b"cid-x");
    canon.extend_from_slice(&1u64.to_be_bytes());
    canon.extend_from_slice(&0u64.to_be_bytes());
    lp(&mut canon, r.request_id.as_bytes());
    lp(&mut canon, &r.nonce);
    lp(&mut canon, format!("responses/{}.resp", r.request_id).as_bytes());
    lp(&mut canon, b"payload");
    assert_eq!(r.canonical_bytes(), canon);

    let k_req = hmac_oracle(&[0x42; 32], b"c4req");
    assert_eq!(r.mac, hmac_oracle(&k_req, &canon));
}

#[test]
fn response_tag_matches_hand_built_encoding() {
    let sk = SessionKey::new([0x42; 32]);
    let resp = build_response(&sk, "1-0-ab", Some("eid-0001"), 3, ResponseStatus::Failed, b"out", None)
        .unwrap();
    let mut canon = b"C4RSP\x01".to_vec();
    lp(&mut canon, b"1-0-ab");
    canon.push(1);
    lp(&mut canon, b"eid-0001");
    canon.extend_from_slice(&3i64.to_be_bytes());
    canon.push(1);
    lp(&mut canon, b"out");
    canon.push(0);
    assert_eq!(resp.canonical_bytes(), canon);
    let k_resp = hmac_oracle(&[0x42; 32], b"c4resp");
    assert_eq!(resp.mac, hmac_oracle(&k_resp, &canon));
}

fn sessions() -> (SessionState, SessionState) {
    let mut anchor = SessionState::new("c1", SessionKey::new([1; 32]));
    anchor.advance_epoch();
    let runtime = anchor.clone();
    (anchor, runtime)
}

proptest! {
    #[test]
    fn any_bit_flip_in_the_tagged_bytes_is_rejected(
        field in 0usize..8,
        bit in 0usize..64,
        payload in prop::collection::vec(any::<u8>(), 1..32),
    ) {
        let (mut anchor, runtime) = sessions();
        let mut r = anchor.build_request("hello", &payload);
        let flip = |b: &mut [u8]| { let i = (bit / 8) % b.len(); b[i] ^= 1 << (bit % 8); };
        match field {
            0 => { let mut v = r.stage.clone().into_bytes(); flip(&mut v); r.stage = String::from_utf8_lossy(&v).into_owned(); }
            1 => { let mut v = r.cid.clone().into_bytes(); flip(&mut v); r.cid = String::from_utf8_lossy(&v).into_owned(); }
            2 => r.epoch ^= 1 << (bit % 64),
            3 => r.seq ^= 1 << (bit % 64),
            4 => flip(&mut r.nonce),
            5 => flip(&mut r.payload),
            6 => flip(&mut r.mac),
            _ => { let mut v = r.request_id.clone().into_bytes(); flip(&mut v); r.request_id = String::from_utf8_lossy(&v).into_owned(); }
        }
        let res = validate_request(&r, &runtime, "c1", Path::new("/s/c1"));
        prop_assert!(res.is_err());
        prop_assert!(matches!(
            res.unwrap_err(),
            RejectReason::AuthMacInvalid
                | RejectReason::BindCidMismatch
                | RejectReason::BindEpochMismatch
                | RejectReason::BindBadResponsePath
        ));
    }

    #[test]
    fn forged_tag_under_wrong_key_is_rejected(key in any::<[u8; 32]>()) {
        prop_assume!(key != [1; 32]);
        let (_, runtime) = sessions();
        let mut forger = SessionState::new("c1", SessionKey::new(key));
        forger.advance_epoch();
        let r = forger.build_request("hello", b"");
        prop_assert_eq!(
            validate_request(&r, &runtime, "c1", Path::new("/s/c1")),
            Err(RejectReason::AuthMacInvalid)
        );
    }

    #[test]
    fn response_tamper_detected(rc in any::<i32>(), out in prop::collection::vec(any::<u8>(), 0..16), bit in 0usize..8) {
        let sk = SessionKey::new([5; 32]);
        let r = build_response(&sk, "1-0-aa", Some("eid-0001"), rc, ResponseStatus::Completed, &out, None).unwrap();
        prop_assert!(verify_response(&r, &sk, |_| true));
        let mut t = r.clone();
        t.rc = t.rc.wrapping_add(1 << bit);
        prop_assert!(!verify_response(&t, &sk, |_| true));
        let mut t = r.clone();
        t.status = ResponseStatus::Failed;
        prop_assert!(!verify_response(&t, &sk, |_| true));
        prop_assert!(!verify_response(&r, &SessionKey::new([6; 32]), |_| true));
    }
}
