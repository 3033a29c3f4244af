//! Attestation kernel.
//!
//! The whole trusted computing base of an emulated device: a keystore of
//! per-session shared keys, a send and a receive counter per session, and the
//! two functions that bind payloads to those counters.
//!
//! ```text
//! attest(s, m):  cnt <- send_cnt[s]++
//!                tag <- HMAC-SHA-384(key[s], m || device_be32 || cnt_be64), zero-padded to 64B
//! verify(s, x):  accept iff tag(x) == recomputed && x.cnt == recv_cnt[s]++
//! ```
//!
//! A rejected message leaves the receive counter untouched, so a later
//! byte-identical retransmission of the expected counter is still accepted.

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha384;

type HmacSha384 = Hmac<Sha384>;

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 64;
pub const MAC_LEN: usize = 48;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session#{}", self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "device#{}", self.0)
    }
}

/// A 32-byte session secret. Never serialized and redacted from `Debug`.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; KEY_LEN]);

impl SessionKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    /// Raw key bytes. Only key-distribution code and secrecy scans need this.
    pub fn expose_secret(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(<redacted>)")
    }
}

/// 64-byte attestation: a 48-byte HMAC-SHA-384 followed by 16 zero bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttestationTag([u8; TAG_LEN]);

impl AttestationTag {
    pub fn from_bytes(bytes: [u8; TAG_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; TAG_LEN] {
        &self.0
    }

    pub fn mac(&self) -> &[u8] {
        &self.0[..MAC_LEN]
    }

    /// True when the padding bytes are all zero.
    pub fn is_canonical(&self) -> bool {
        self.0[MAC_LEN..].iter().all(|b| *b == 0)
    }
}

impl fmt::Debug for AttestationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttestationTag({}..)", hex::encode(&self.0[..8]))
    }
}

/// An attested message as emitted by `attest` and accepted by `verify`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttestedMessage {
    pub tag: AttestationTag,
    pub payload: Vec<u8>,
    pub device: DeviceId,
    pub session: SessionId,
    pub counter: u64,
}

impl AttestedMessage {
    /// The `(device, session, counter)` triple a correct kernel never reuses.
    pub fn identity(&self) -> (DeviceId, SessionId, u64) {
        (self.device, self.session, self.counter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("{0} is not provisioned")]
    UnknownSession(SessionId),
    #[error("{0} is already provisioned")]
    DuplicateSession(SessionId),
    #[error("payload of {len} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("attestation mismatch on {session} at counter {counter}")]
    AuthFailure { session: SessionId, counter: u64 },
    #[error("counter mismatch on {session}: expected {expected}, got {found}")]
    CounterMismatch {
        session: SessionId,
        expected: u64,
        found: u64,
    },
    #[error("counter space exhausted on {0}")]
    CounterExhausted(SessionId),
}

/// Computes the attestation over `payload || device || counter`.
///
/// Pure in its inputs; both `attest` and `verify` go through here.
pub fn compute_tag(key: &SessionKey, payload: &[u8], device: DeviceId, counter: u64) -> AttestationTag {
    let mut mac = HmacSha384::new_from_slice(&key.0).expect("HMAC accepts any key length");
    mac.update(payload);
    mac.update(&device.0.to_be_bytes());
    mac.update(&counter.to_be_bytes());
    let out = mac.finalize().into_bytes();
    let mut tag = [0u8; TAG_LEN];
    tag[..MAC_LEN].copy_from_slice(&out);
    AttestationTag(tag)
}

fn tags_match(a: &AttestationTag, b: &AttestationTag) -> bool {
    // constant-time over all 64 bytes, padding included
    a.0.iter().zip(b.0.iter()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Per-session kernel state: the shared key and the two monotonic counters.
#[derive(Debug, Clone)]
pub struct SessionState {
    key: SessionKey,
    send_cnt: u64,
    recv_cnt: u64,
}

impl SessionState {
    pub fn new(key: SessionKey) -> Self {
        Self {
            key,
            send_cnt: 0,
            recv_cnt: 0,
        }
    }

    pub fn send_count(&self) -> u64 {
        self.send_cnt
    }

    pub fn recv_count(&self) -> u64 {
        self.recv_cnt
    }

    pub fn attest(
        &mut self,
        device: DeviceId,
        session: SessionId,
        payload: &[u8],
        max_payload: usize,
    ) -> Result<AttestedMessage, KernelError> {
        if payload.len() > max_payload {
            return Err(KernelError::PayloadTooLarge {
                len: payload.len(),
                max: max_payload,
            });
        }
        let counter = self.send_cnt;
        self.send_cnt = counter
            .checked_add(1)
            .ok_or(KernelError::CounterExhausted(session))?;
        Ok(AttestedMessage {
            tag: compute_tag(&self.key, payload, device, counter),
            payload: payload.to_vec(),
            device,
            session,
            counter,
        })
    }

    /// Checks the tag only; no counter is consulted or advanced.
    pub fn check_tag(&self, msg: &AttestedMessage) -> Result<(), KernelError> {
        let expected = compute_tag(&self.key, &msg.payload, msg.device, msg.counter);
        if tags_match(&expected, &msg.tag) {
            Ok(())
        } else {
            Err(KernelError::AuthFailure {
                session: msg.session,
                counter: msg.counter,
            })
        }
    }

    pub fn verify(&mut self, msg: &AttestedMessage) -> Result<(), KernelError> {
        self.check_tag(msg)?;
        if msg.counter != self.recv_cnt {
            return Err(KernelError::CounterMismatch {
                session: msg.session,
                expected: self.recv_cnt,
                found: msg.counter,
            });
        }
        self.recv_cnt = self
            .recv_cnt
            .checked_add(1)
            .ok_or(KernelError::CounterExhausted(msg.session))?;
        Ok(())
    }
}

/// The keystore plus counters of one device.
#[derive(Debug, Clone)]
pub struct Kernel {
    device: DeviceId,
    max_payload: usize,
    sessions: BTreeMap<SessionId, SessionState>,
}

impl Kernel {
    pub fn new(device: DeviceId) -> Self {
        Self::with_max_payload(device, DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(device: DeviceId, max_payload: usize) -> Self {
        Self {
            device,
            max_payload,
            sessions: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn max_payload(&self) -> usize {
        self.max_payload
    }

    pub fn provision_session(&mut self, session: SessionId, key: SessionKey) -> Result<&SessionState, KernelError> {
        if self.sessions.contains_key(&session) {
            return Err(KernelError::DuplicateSession(session));
        }
        Ok(self.sessions.entry(session).or_insert(SessionState::new(key)))
    }

    pub fn session(&self, session: SessionId) -> Option<&SessionState> {
        self.sessions.get(&session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.sessions.keys().copied()
    }

    fn state_mut(&mut self, session: SessionId) -> Result<&mut SessionState, KernelError> {
        self.sessions
            .get_mut(&session)
            .ok_or(KernelError::UnknownSession(session))
    }

    pub fn attest(&mut self, session: SessionId, payload: &[u8]) -> Result<AttestedMessage, KernelError> {
        let (device, max) = (self.device, self.max_payload);
        self.state_mut(session)?.attest(device, session, payload, max)
    }

    /// Verifies `msg` against the receive stream of `msg.session`.
    pub fn verify(&mut self, msg: &AttestedMessage) -> Result<(), KernelError> {
        if msg.payload.len() > self.max_payload {
            return Err(KernelError::PayloadTooLarge {
                len: msg.payload.len(),
                max: self.max_payload,
            });
        }
        self.state_mut(msg.session)?.verify(msg)
    }

    /// Stateless tag check under the key of `session`.
    pub fn verify_tag(&self, session: SessionId, msg: &AttestedMessage) -> Result<(), KernelError> {
        self.sessions
            .get(&session)
            .ok_or(KernelError::UnknownSession(session))?
            .check_tag(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> SessionKey {
        SessionKey::new([b; KEY_LEN])
    }

    fn pair() -> (Kernel, Kernel) {
        let mut a = Kernel::new(DeviceId(1));
        let mut b = Kernel::new(DeviceId(2));
        a.provision_session(SessionId(7), key(0x0b)).unwrap();
        b.provision_session(SessionId(7), key(0x0b)).unwrap();
        (a, b)
    }

    #[test]
    fn first_attest_uses_counter_zero() {
        let (mut a, _) = pair();
        let m = a.attest(SessionId(7), b"m").unwrap();
        assert_eq!(m.counter, 0);
        assert_eq!(a.session(SessionId(7)).unwrap().send_count(), 1);
    }

    #[test]
    fn consecutive_attests_differ_for_identical_payloads() {
        let (mut a, _) = pair();
        let m0 = a.attest(SessionId(7), b"same").unwrap();
        let m1 = a.attest(SessionId(7), b"same").unwrap();
        assert_eq!((m0.counter, m1.counter), (0, 1));
        assert_ne!(m0.tag, m1.tag);
        assert!(m0.tag.is_canonical());
    }

    #[test]
    fn round_trip_then_replay_rejected() {
        let (mut a, mut b) = pair();
        let m = a.attest(SessionId(7), b"hello").unwrap();
        b.verify(&m).unwrap();
        assert_eq!(b.session(SessionId(7)).unwrap().recv_count(), 1);
        assert_eq!(
            b.verify(&m),
            Err(KernelError::CounterMismatch {
                session: SessionId(7),
                expected: 1,
                found: 0
            })
        );
    }

    #[test]
    fn flipped_payload_is_auth_failure_and_counter_untouched() {
        let (mut a, mut b) = pair();
        let mut m = a.attest(SessionId(7), b"hello").unwrap();
        m.payload[0] ^= 1;
        assert!(matches!(b.verify(&m), Err(KernelError::AuthFailure { .. })));
        assert_eq!(b.session(SessionId(7)).unwrap().recv_count(), 0);
        m.payload[0] ^= 1;
        b.verify(&m).unwrap();
    }

    #[test]
    fn gap_rejected_then_in_order_accepted() {
        let (mut a, mut b) = pair();
        let m0 = a.attest(SessionId(7), b"0").unwrap();
        let m1 = a.attest(SessionId(7), b"1").unwrap();
        assert!(matches!(b.verify(&m1), Err(KernelError::CounterMismatch { .. })));
        b.verify(&m0).unwrap();
        b.verify(&m1).unwrap();
    }

    #[test]
    fn duplicate_provision_rejected() {
        let mut a = Kernel::new(DeviceId(1));
        a.provision_session(SessionId(1), key(1)).unwrap();
        assert_eq!(
            a.provision_session(SessionId(1), key(2)).unwrap_err(),
            KernelError::DuplicateSession(SessionId(1))
        );
    }

    #[test]
    fn unknown_session_and_oversized_payload() {
        let mut a = Kernel::with_max_payload(DeviceId(1), 4);
        a.provision_session(SessionId(1), key(1)).unwrap();
        assert_eq!(a.attest(SessionId(9), b"x"), Err(KernelError::UnknownSession(SessionId(9))));
        assert_eq!(
            a.attest(SessionId(1), b"12345"),
            Err(KernelError::PayloadTooLarge { len: 5, max: 4 })
        );
        assert_eq!(a.session(SessionId(1)).unwrap().send_count(), 0);
    }

    #[test]
    fn counter_wraparound_is_an_error() {
        let mut s = SessionState::new(key(3));
        s.send_cnt = u64::MAX;
        assert_eq!(
            s.attest(DeviceId(1), SessionId(1), b"x", 16),
            Err(KernelError::CounterExhausted(SessionId(1)))
        );
        assert_eq!(s.send_count(), u64::MAX);
    }

    #[test]
    fn wrong_key_fails() {
        let (mut a, _) = pair();
        let mut c = Kernel::new(DeviceId(3));
        c.provision_session(SessionId(7), key(0x0c)).unwrap();
        let m = a.attest(SessionId(7), b"x").unwrap();
        assert!(matches!(c.verify(&m), Err(KernelError::AuthFailure { .. })));
    }

    /// Textbook HMAC over SHA-384 (128-byte block), built straight on the hash.
    fn reference_hmac_sha384(key: &[u8], msg: &[u8]) -> [u8; 48] {
        use sha2::Digest;
        let mut block = [0u8; 128];
        block[..key.len()].copy_from_slice(key);
        let inner: Vec<u8> = block.iter().map(|b| b ^ 0x36).chain(msg.iter().copied()).collect();
        let inner_hash = Sha384::digest(&inner);
        let outer: Vec<u8> = block.iter().map(|b| b ^ 0x5c).chain(inner_hash.iter().copied()).collect();
        Sha384::digest(&outer).into()
    }

    #[test]
    fn tag_matches_reference_hmac() {
        let payload = b"tnic-payload";
        let tag = compute_tag(&key(0x0b), payload, DeviceId(0x0102_0304), 42);
        let mut input = payload.to_vec();
        input.extend_from_slice(&0x0102_0304u32.to_be_bytes());
        input.extend_from_slice(&42u64.to_be_bytes());
        assert_eq!(tag.mac(), reference_hmac_sha384(&[0x0b; 32], &input));
        // frozen from Python's hmac/hashlib over the same concatenation
        assert_eq!(
            hex::encode(tag.mac()),
            "04a7d3670fae7efb418f17f334257d98bdda4f4e580338c64796dd3076a00a1c\
             5f24d714c8a437a8c1f332769a4da9ab"
        );
        assert!(tag.is_canonical());
    }

    #[test]
    fn key_is_redacted_in_debug() {
        assert_eq!(format!("{:?}", key(0xaa)), "SessionKey(<redacted>)");
    }
}
