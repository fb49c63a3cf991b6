// SPDX-License-Identifier: Apache-2.0

//! Authenticated request/response messages exchanged between the anchor and
//! the runtime through the host-visible spool.
//!
//! A request is accepted only if it is bound to the instance and epoch,
//! carries a valid tag under the session key, has never been seen before in
//! this epoch, and is ordered after every previously accepted request.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use base64::Engine as _;
use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

pub const PROTOCOL_SCHEMA_VERSION: u32 = 1;
pub const SESSION_SCHEMA_VERSION: u32 = 1;

const REQUEST_KEY_LABEL: &[u8] = b"c4req";
const RESPONSE_KEY_LABEL: &[u8] = b"c4resp";
const REQUEST_TAG: &[u8] = b"C4REQ\x01";
const RESPONSE_TAG: &[u8] = b"C4RSP\x01";

pub const RESPONSES_DIR: &str = "responses";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("a rejected response cannot carry an EID")]
    RejectedWithEid,
    #[error("session key must be 32 bytes")]
    BadKey,
}

/// 256-bit session secret.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; 32]);

impl SessionKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn random() -> Self {
        let mut b = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut b);
        Self(b)
    }

    pub fn from_hex(s: &str) -> Result<Self, ProtocolError> {
        let v = hex::decode(s).map_err(|_| ProtocolError::BadKey)?;
        let arr: [u8; 32] = v.try_into().map_err(|_| ProtocolError::BadKey)?;
        Ok(Self(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    fn derive(&self, label: &[u8]) -> [u8; 32] {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(label);
        mac.finalize().into_bytes().into()
    }

    pub fn request_key(&self) -> [u8; 32] {
        self.derive(REQUEST_KEY_LABEL)
    }

    pub fn response_key(&self) -> [u8; 32] {
        self.derive(RESPONSE_KEY_LABEL)
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

fn tag(key: &[u8; 32], bytes: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(bytes);
    mac.finalize().into_bytes().into()
}

fn tag_matches(key: &[u8; 32], bytes: &[u8], expected: &[u8; 32]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(bytes);
    mac.verify_slice(expected).is_ok()
}

/// Per-instance session parameters plus replay bookkeeping.
///
/// The runtime uses `next_seq` as the ordering watermark: the lowest
/// sequence number it will still accept. The anchor uses it as its next
/// sequence number to emit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub cid: String,
    pub epoch: u64,
    pub sk: SessionKey,
    pub next_seq: u64,
    pub seen_request_ids: BTreeSet<String>,
    pub seen_nonces: BTreeSet<[u8; 16]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    schema_version: u32,
    cid: String,
    epoch: u64,
    sk_hex: String,
    next_seq: u64,
    seen_request_ids: Vec<String>,
    seen_nonces: Vec<String>,
}

impl SessionState {
    pub fn new(cid: impl Into<String>, sk: SessionKey) -> Self {
        Self {
            cid: cid.into(),
            epoch: 0,
            sk,
            next_seq: 0,
            seen_request_ids: BTreeSet::new(),
            seen_nonces: BTreeSet::new(),
        }
    }

    /// Starts a new epoch (anchor start or restart).
    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.next_seq = 0;
        self.seen_request_ids.clear();
        self.seen_nonces.clear();
    }

    /// Records an accepted request: replay sets grow and the watermark moves
    /// past its sequence number.
    pub fn commit_accept(&mut self, req: &StageRequest) {
        self.seen_request_ids.insert(req.request_id.clone());
        self.seen_nonces.insert(req.nonce);
        self.next_seq = self.next_seq.max(req.seq + 1);
    }

    pub fn to_json(&self) -> Vec<u8> {
        let file = SessionFile {
            schema_version: SESSION_SCHEMA_VERSION,
            cid: self.cid.clone(),
            epoch: self.epoch,
            sk_hex: self.sk.to_hex(),
            next_seq: self.next_seq,
            seen_request_ids: self.seen_request_ids.iter().cloned().collect(),
            seen_nonces: self.seen_nonces.iter().map(hex::encode).collect(),
        };
        serde_json::to_vec_pretty(&file).expect("session serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let file: SessionFile =
            serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if file.schema_version != SESSION_SCHEMA_VERSION {
            return Err(ProtocolError::Malformed(format!(
                "unsupported session schema {}",
                file.schema_version
            )));
        }
        let mut nonces = BTreeSet::new();
        for n in &file.seen_nonces {
            nonces.insert(decode_nonce(n)?);
        }
        Ok(Self {
            cid: file.cid,
            epoch: file.epoch,
            sk: SessionKey::from_hex(&file.sk_hex)?,
            next_seq: file.next_seq,
            seen_request_ids: file.seen_request_ids.into_iter().collect(),
            seen_nonces: nonces,
        })
    }

    /// Builds the next request of this session and advances `next_seq`.
    pub fn build_request(&mut self, stage: &str, payload: &[u8]) -> StageRequest {
        self.build_request_with(stage, payload, &mut rand::thread_rng())
    }

    pub fn build_request_with<R: RngCore + ?Sized>(
        &mut self,
        stage: &str,
        payload: &[u8],
        rng: &mut R,
    ) -> StageRequest {
        let seq = self.next_seq;
        self.next_seq += 1;
        let mut suffix = [0u8; 4];
        rng.fill_bytes(&mut suffix);
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut nonce);
        let request_id = format!("{}-{}-{}", self.epoch, seq, hex::encode(suffix));
        let response_path = response_path_for(&request_id);
        let mut req = StageRequest {
            stage: stage.to_string(),
            cid: self.cid.clone(),
            epoch: self.epoch,
            seq,
            request_id,
            nonce,
            response_path,
            payload: payload.to_vec(),
            mac: [0u8; 32],
        };
        req.mac = req.compute_mac(&self.sk);
        req
    }
}

fn decode_nonce(s: &str) -> Result<[u8; 16], ProtocolError> {
    let v = hex::decode(s).map_err(|e| ProtocolError::Malformed(format!("nonce: {e}")))?;
    v.try_into()
        .map_err(|_| ProtocolError::Malformed("nonce must be 16 bytes".into()))
}

fn decode_mac(s: &str) -> Result<[u8; 32], ProtocolError> {
    let v = hex::decode(s).map_err(|e| ProtocolError::Malformed(format!("mac: {e}")))?;
    v.try_into()
        .map_err(|_| ProtocolError::Malformed("mac must be 32 bytes".into()))
}

/// Relative spool path of the response for `request_id`.
pub fn response_path_for(request_id: &str) -> String {
    format!("{RESPONSES_DIR}/{request_id}.resp")
}

/// Identifiers that may safely become a file name in the spool.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Deterministic, injective encoder: fixed field order, u32 big-endian
/// length prefixes, fixed-width big-endian integers.
#[derive(Default)]
struct Canon(Vec<u8>);

impl Canon {
    fn raw(mut self, b: &[u8]) -> Self {
        self.0.extend_from_slice(b);
        self
    }

    fn bytes(mut self, b: &[u8]) -> Self {
        let len = u32::try_from(b.len()).expect("field shorter than 4 GiB");
        self.0.extend_from_slice(&len.to_be_bytes());
        self.0.extend_from_slice(b);
        self
    }

    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn i64(mut self, v: i64) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn opt(self, v: Option<&[u8]>) -> Self {
        match v {
            None => self.raw(&[0]),
            Some(b) => self.raw(&[1]).bytes(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRequest {
    pub stage: String,
    pub cid: String,
    pub epoch: u64,
    pub seq: u64,
    pub request_id: String,
    pub nonce: [u8; 16],
    pub response_path: String,
    pub payload: Vec<u8>,
    pub mac: [u8; 32],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestEnvelope {
    schema_version: u32,
    stage: String,
    cid: String,
    epoch: u64,
    seq: u64,
    request_id: String,
    nonce_hex: String,
    response_path: String,
    payload_b64: String,
    mac_hex: String,
}

impl StageRequest {
    /// Canonical bytes covered by the request tag (every field but `mac`).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        Canon::default()
            .raw(REQUEST_TAG)
            .bytes(self.stage.as_bytes())
            .bytes(self.cid.as_bytes())
            .u64(self.epoch)
            .u64(self.seq)
            .bytes(self.request_id.as_bytes())
            .bytes(&self.nonce)
            .bytes(self.response_path.as_bytes())
            .bytes(&self.payload)
            .0
    }

    pub fn compute_mac(&self, sk: &SessionKey) -> [u8; 32] {
        tag(&sk.request_key(), &self.canonical_bytes())
    }

    pub fn mac_valid(&self, sk: &SessionKey) -> bool {
        tag_matches(&sk.request_key(), &self.canonical_bytes(), &self.mac)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let env = RequestEnvelope {
            schema_version: PROTOCOL_SCHEMA_VERSION,
            stage: self.stage.clone(),
            cid: self.cid.clone(),
            epoch: self.epoch,
            seq: self.seq,
            request_id: self.request_id.clone(),
            nonce_hex: hex::encode(self.nonce),
            response_path: self.response_path.clone(),
            payload_b64: base64::engine::general_purpose::STANDARD.encode(&self.payload),
            mac_hex: hex::encode(self.mac),
        };
        serde_json::to_vec_pretty(&env).expect("request serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let env: RequestEnvelope =
            serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if env.schema_version != PROTOCOL_SCHEMA_VERSION {
            return Err(ProtocolError::Malformed(format!(
                "unsupported request schema {}",
                env.schema_version
            )));
        }
        Ok(Self {
            stage: env.stage,
            cid: env.cid,
            epoch: env.epoch,
            seq: env.seq,
            request_id: env.request_id,
            nonce: decode_nonce(&env.nonce_hex)?,
            response_path: env.response_path,
            payload: base64::engine::general_purpose::STANDARD
                .decode(env.payload_b64)
                .map_err(|e| ProtocolError::Malformed(format!("payload: {e}")))?,
            mac: decode_mac(&env.mac_hex)?,
        })
    }
}

/// Why a request was not accepted. Checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BindCidMismatch,
    BindEpochMismatch,
    BindBadResponsePath,
    AuthMacInvalid,
    FreshReplayedId,
    FreshReplayedNonce,
    OrderStaleSeq,
    /// The spooled file could not be decoded at all.
    Malformed,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BindCidMismatch => "bind_cid_mismatch",
            RejectReason::BindEpochMismatch => "bind_epoch_mismatch",
            RejectReason::BindBadResponsePath => "bind_bad_response_path",
            RejectReason::AuthMacInvalid => "auth_mac_invalid",
            RejectReason::FreshReplayedId => "fresh_replayed_id",
            RejectReason::FreshReplayedNonce => "fresh_replayed_nonce",
            RejectReason::OrderStaleSeq => "order_stale_seq",
            RejectReason::Malformed => "malformed",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lexically normalizes a relative path. `None` if it is absolute or climbs
/// above its base.
fn normalize_relative(path: &str) -> Option<PathBuf> {
    let mut out: Vec<&std::ffi::OsStr> = Vec::new();
    for c in Path::new(path).components() {
        match c {
            Component::Normal(s) => out.push(s),
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop()?;
            }
            Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    Some(out.iter().collect())
}

/// Response paths must name exactly `responses/<request_id>.resp` inside the
/// instance's state directory.
fn response_path_bound(req: &StageRequest, statedir_root: &Path) -> bool {
    let Some(norm) = normalize_relative(&req.response_path) else {
        return false;
    };
    if !is_safe_id(&req.request_id) {
        return false;
    }
    let expected = Path::new(RESPONSES_DIR).join(format!("{}.resp", req.request_id));
    if norm != expected {
        return false;
    }
    statedir_root
        .join(&norm)
        .starts_with(statedir_root.join(RESPONSES_DIR))
}

/// The Accept predicate: bind, auth, fresh, ordered, first failure wins.
///
/// Does not mutate the session; the caller commits acceptance with
/// [`SessionState::commit_accept`] while holding the session lock.
pub fn validate_request(
    req: &StageRequest,
    session: &SessionState,
    expected_cid: &str,
    statedir_root: &Path,
) -> Result<(), RejectReason> {
    if req.cid != expected_cid || session.cid != expected_cid {
        return Err(RejectReason::BindCidMismatch);
    }
    if req.epoch != session.epoch {
        return Err(RejectReason::BindEpochMismatch);
    }
    if !response_path_bound(req, statedir_root) {
        return Err(RejectReason::BindBadResponsePath);
    }
    if !req.mac_valid(&session.sk) {
        return Err(RejectReason::AuthMacInvalid);
    }
    if session.seen_request_ids.contains(&req.request_id) {
        return Err(RejectReason::FreshReplayedId);
    }
    if session.seen_nonces.contains(&req.nonce) {
        return Err(RejectReason::FreshReplayedNonce);
    }
    if req.seq < session.next_seq {
        return Err(RejectReason::OrderStaleSeq);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseStatus {
    Completed,
    Failed,
    Rejected,
}

impl ResponseStatus {
    fn code(self) -> u8 {
        match self {
            ResponseStatus::Completed => 0,
            ResponseStatus::Failed => 1,
            ResponseStatus::Rejected => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageResponse {
    pub request_id: String,
    pub eid: Option<String>,
    pub rc: i32,
    pub status: ResponseStatus,
    pub output: Vec<u8>,
    pub reject_reason: Option<RejectReason>,
    pub mac: [u8; 32],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseEnvelope {
    schema_version: u32,
    request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eid: Option<String>,
    rc: i32,
    status: ResponseStatus,
    output_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reject_reason: Option<RejectReason>,
    mac_hex: String,
}

impl StageResponse {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        Canon::default()
            .raw(RESPONSE_TAG)
            .bytes(self.request_id.as_bytes())
            .opt(self.eid.as_deref().map(str::as_bytes))
            .i64(i64::from(self.rc))
            .raw(&[self.status.code()])
            .bytes(&self.output)
            .opt(self.reject_reason.map(|r| r.as_str().as_bytes()))
            .0
    }

    pub fn to_json(&self) -> Vec<u8> {
        let env = ResponseEnvelope {
            schema_version: PROTOCOL_SCHEMA_VERSION,
            request_id: self.request_id.clone(),
            eid: self.eid.clone(),
            rc: self.rc,
            status: self.status,
            output_b64: base64::engine::general_purpose::STANDARD.encode(&self.output),
            reject_reason: self.reject_reason,
            mac_hex: hex::encode(self.mac),
        };
        serde_json::to_vec_pretty(&env).expect("response serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let env: ResponseEnvelope =
            serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if env.schema_version != PROTOCOL_SCHEMA_VERSION {
            return Err(ProtocolError::Malformed(format!(
                "unsupported response schema {}",
                env.schema_version
            )));
        }
        Ok(Self {
            request_id: env.request_id,
            eid: env.eid,
            rc: env.rc,
            status: env.status,
            output: base64::engine::general_purpose::STANDARD
                .decode(env.output_b64)
                .map_err(|e| ProtocolError::Malformed(format!("output: {e}")))?,
            reject_reason: env.reject_reason,
            mac: decode_mac(&env.mac_hex)?,
        })
    }
}

pub fn build_response(
    sk: &SessionKey,
    request_id: &str,
    eid: Option<&str>,
    rc: i32,
    status: ResponseStatus,
    output: &[u8],
    reject_reason: Option<RejectReason>,
) -> Result<StageResponse, ProtocolError> {
    if status == ResponseStatus::Rejected && eid.is_some() {
        return Err(ProtocolError::RejectedWithEid);
    }
    let mut resp = StageResponse {
        request_id: request_id.to_string(),
        eid: eid.map(str::to_string),
        rc,
        status,
        output: output.to_vec(),
        reject_reason,
        mac: [0u8; 32],
    };
    resp.mac = tag(&sk.response_key(), &resp.canonical_bytes());
    Ok(resp)
}

/// True iff the tag verifies under the response key and the response answers
/// a request the caller is still waiting for.
pub fn verify_response<F>(resp: &StageResponse, sk: &SessionKey, is_outstanding: F) -> bool
where
    F: Fn(&str) -> bool,
{
    if resp.status == ResponseStatus::Rejected && resp.eid.is_some() {
        return false;
    }
    tag_matches(&sk.response_key(), &resp.canonical_bytes(), &resp.mac)
        && is_outstanding(&resp.request_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn session(cid: &str) -> SessionState {
        let mut s = SessionState::new(cid, SessionKey::new([7u8; 32]));
        s.advance_epoch();
        s
    }

    fn root() -> PathBuf {
        PathBuf::from("/var/lib/c4/c1")
    }

    #[test]
    fn first_request_of_epoch_one() {
        let mut s = session("c1");
        let r = s.build_request("hello", b"");
        assert_eq!(r.seq, 0);
        assert!(r.request_id.starts_with("1-0-"));
        assert_eq!(s.next_seq, 1);
    }

    #[test]
    fn consecutive_builds_are_distinct() {
        let mut s = session("c1");
        let a = s.build_request("hello", b"");
        let b = s.build_request("hello", b"");
        assert_eq!((a.seq, b.seq), (0, 1));
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.request_id, b.request_id);
    }

    #[test]
    fn honest_request_is_accepted_and_replay_rejected() {
        let mut anchor = session("c1");
        let mut runtime = anchor.clone();
        let r = anchor.build_request("hello", b"x");
        assert_eq!(validate_request(&r, &runtime, "c1", &root()), Ok(()));
        runtime.commit_accept(&r);
        assert_eq!(
            validate_request(&r, &runtime, "c1", &root()),
            Err(RejectReason::FreshReplayedId)
        );
    }

    #[test]
    fn misrouted_request_is_rejected() {
        let mut other = session("c2");
        let r = other.build_request("hello", b"");
        assert_eq!(
            validate_request(&r, &session("c1"), "c1", &root()),
            Err(RejectReason::BindCidMismatch)
        );
    }

    #[test]
    fn flipped_payload_fails_auth() {
        let mut s = session("c1");
        let mut r = s.build_request("hello", b"abc");
        r.payload[0] ^= 1;
        assert_eq!(
            validate_request(&r, &session("c1"), "c1", &root()),
            Err(RejectReason::AuthMacInvalid)
        );
    }

    #[test]
    fn escaping_response_path_is_rejected() {
        let mut s = session("c1");
        let mut r = s.build_request("hello", b"");
        for bad in [
            "../../etc/x",
            "/etc/passwd",
            "responses/../state.json",
            "responses/other.resp",
            "requests/x.resp",
        ] {
            r.response_path = bad.into();
            r.mac = r.compute_mac(&s.sk);
            assert_eq!(
                validate_request(&r, &session("c1"), "c1", &root()),
                Err(RejectReason::BindBadResponsePath),
                "{bad}"
            );
        }
        r.response_path = format!("./responses/./{}.resp", r.request_id);
        r.mac = r.compute_mac(&s.sk);
        assert_eq!(validate_request(&r, &session("c1"), "c1", &root()), Ok(()));
    }

    #[test]
    fn stale_sequence_is_rejected_but_gaps_are_fine() {
        let mut anchor = session("c1");
        let mut runtime = anchor.clone();
        let r0 = anchor.build_request("a", b"");
        let r1 = anchor.build_request("a", b"");
        let r2 = anchor.build_request("a", b"");
        // r1 dropped by the host
        runtime.commit_accept(&r2);
        assert_eq!(
            validate_request(&r0, &runtime, "c1", &root()),
            Err(RejectReason::OrderStaleSeq)
        );
        let r3 = anchor.build_request("a", b"");
        assert_eq!(validate_request(&r3, &runtime, "c1", &root()), Ok(()));
        let _ = r1;
    }

    #[test]
    fn epoch_isolation() {
        let mut anchor = session("c1");
        let r = anchor.build_request("a", b"");
        let mut runtime = anchor.clone();
        runtime.advance_epoch();
        assert_eq!(
            validate_request(&r, &runtime, "c1", &root()),
            Err(RejectReason::BindEpochMismatch)
        );
    }

    #[test]
    fn canonical_bytes_injective_under_field_swap() {
        let mut s = session("c1");
        let r = s.build_request("alpha", b"");
        let mut swapped = r.clone();
        swapped.stage = r.request_id.clone();
        swapped.request_id = r.stage.clone();
        assert_ne!(r.canonical_bytes(), swapped.canonical_bytes());
        assert_eq!(r.canonical_bytes(), r.clone().canonical_bytes());

        // length prefixes keep adjacent fields from bleeding into each other
        let mut shifted = r.clone();
        shifted.stage = "alph".into();
        shifted.cid = "ac1".into();
        assert_ne!(r.canonical_bytes(), shifted.canonical_bytes());
    }

    #[test]
    fn request_json_roundtrip() {
        let mut s = session("c1");
        let r = s.build_request_with("hello", b"\x00\xffpay", &mut rand::rngs::StdRng::seed_from_u64(1));
        assert_eq!(StageRequest::from_json(&r.to_json()).unwrap(), r);
        assert!(StageRequest::from_json(b"{\"junk\":1}").is_err());
    }

    #[test]
    fn response_roundtrip_and_tamper() {
        let s = session("c1");
        let resp = build_response(&s.sk, "1-0-aa", Some("eid-0001"), 0, ResponseStatus::Completed, b"hi", None)
            .unwrap();
        assert!(verify_response(&resp, &s.sk, |id| id == "1-0-aa"));
        assert!(!verify_response(&resp, &s.sk, |_| false));
        let mut bad = resp.clone();
        bad.rc = 1;
        assert!(!verify_response(&bad, &s.sk, |_| true));
        let decoded = StageResponse::from_json(&resp.to_json()).unwrap();
        assert_eq!(decoded, resp);
    }

    #[test]
    fn rejected_response_carries_reason_and_no_eid() {
        let s = session("c1");
        assert!(matches!(
            build_response(&s.sk, "x", Some("eid-0001"), 0, ResponseStatus::Rejected, b"", None),
            Err(ProtocolError::RejectedWithEid)
        ));
        let r = build_response(
            &s.sk,
            "1-4-00",
            None,
            0,
            ResponseStatus::Rejected,
            b"",
            Some(RejectReason::OrderStaleSeq),
        )
        .unwrap();
        assert!(verify_response(&r, &s.sk, |_| true));
        assert_eq!(r.reject_reason, Some(RejectReason::OrderStaleSeq));
    }

    #[test]
    fn request_tag_never_verifies_as_response_tag() {
        let mut s = session("c1");
        let r = s.build_request("hello", b"");
        // same bytes under the two derived keys differ
        assert_ne!(s.sk.request_key(), s.sk.response_key());
        assert_ne!(
            tag(&s.sk.request_key(), &r.canonical_bytes()),
            tag(&s.sk.response_key(), &r.canonical_bytes())
        );
    }

    #[test]
    fn session_json_roundtrip() {
        let mut s = session("c1");
        let r = s.build_request("hello", b"");
        s.commit_accept(&r);
        let back = SessionState::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
