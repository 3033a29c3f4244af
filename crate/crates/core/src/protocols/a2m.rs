//! Attested append-only memory.
//!
//! Every log is a [`TamperEvidentLog`] on its own session. Truncation appends
//! a `TRNC` marker to the log and records the marker's attested triple in a
//! dedicated MANIFEST log; the live window `[head, tail)` of a log is found by
//! reading MANIFEST backwards to the last marker for that log.

use std::collections::BTreeMap;

use crate::device::{DeviceError, Endpoint};
use crate::kernel::{AttestedMessage, DeviceId, SessionId};
use crate::log::{LogEntry, TamperEvidentLog};

pub const TRNC: &[u8; 4] = b"TRNC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum A2mError {
    #[error("log {0:?} does not exist")]
    UnknownLog(LogId),
    #[error("log {0:?} already exists")]
    DuplicateLog(LogId),
    #[error("seq {seq} is past the end of the log ({len} entries)")]
    OutOfRange { seq: u64, len: u64 },
    #[error("seq {seq} lies outside the live window [{head}, {tail})")]
    OutOfBounds { seq: u64, head: u64, tail: u64 },
    #[error("stored entry failed attestation")]
    AuthFailure,
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Decoded `TRNC || id || z || head` marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    pub id: LogId,
    pub nonce: u64,
    pub head: u64,
}

impl Truncation {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = TRNC.to_vec();
        out.extend_from_slice(&self.id.0.to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.head.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != 24 || &b[..4] != TRNC {
            return None;
        }
        Some(Self {
            id: LogId(u32::from_be_bytes(b[4..8].try_into().unwrap())),
            nonce: u64::from_be_bytes(b[8..16].try_into().unwrap()),
            head: u64::from_be_bytes(b[16..24].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct A2m {
    device: DeviceId,
    logs: BTreeMap<LogId, TamperEvidentLog>,
    manifest: TamperEvidentLog,
}

impl A2m {
    pub fn new(device: DeviceId, manifest_session: SessionId) -> Self {
        Self {
            device,
            logs: BTreeMap::new(),
            manifest: TamperEvidentLog::new(device, manifest_session),
        }
    }

    pub fn create_log(&mut self, id: LogId, session: SessionId) -> Result<(), A2mError> {
        if self.logs.contains_key(&id) {
            return Err(A2mError::DuplicateLog(id));
        }
        self.logs.insert(id, TamperEvidentLog::new(self.device, session));
        Ok(())
    }

    pub fn log(&self, id: LogId) -> Result<&TamperEvidentLog, A2mError> {
        self.logs.get(&id).ok_or(A2mError::UnknownLog(id))
    }

    /// Raw access for fault injection.
    pub fn log_mut(&mut self, id: LogId) -> Result<&mut TamperEvidentLog, A2mError> {
        self.logs.get_mut(&id).ok_or(A2mError::UnknownLog(id))
    }

    pub fn manifest(&self) -> &TamperEvidentLog {
        &self.manifest
    }

    pub fn append(&mut self, ep: &mut Endpoint, id: LogId, ctx: &[u8]) -> Result<LogEntry, A2mError> {
        let log = self.logs.get_mut(&id).ok_or(A2mError::UnknownLog(id))?;
        Ok(log.append(ep, ctx)?.clone())
    }

    /// Pure local read; no kernel call.
    pub fn lookup(&self, id: LogId, seq: u64) -> Result<LogEntry, A2mError> {
        let log = self.log(id)?;
        log.entries()
            .get(seq as usize)
            .cloned()
            .ok_or(A2mError::OutOfRange {
                seq,
                len: log.len() as u64,
            })
    }

    /// Boundary check `head <= seq < tail`, then the entry's attestation.
    pub fn verify_lookup(
        &self,
        ep: &mut Endpoint,
        id: LogId,
        entry: &LogEntry,
        head: u64,
        tail: u64,
    ) -> Result<(), A2mError> {
        if entry.seq < head || entry.seq >= tail {
            return Err(A2mError::OutOfBounds {
                seq: entry.seq,
                head,
                tail,
            });
        }
        let session = self.log(id)?.session();
        ep.verify_tag(session, &entry.attested(self.device, session))
            .map_err(|_| A2mError::AuthFailure)
    }

    /// Moves the head of `id` to `head`. Returns the MANIFEST entry.
    pub fn truncate(&mut self, ep: &mut Endpoint, id: LogId, head: u64, nonce: u64) -> Result<LogEntry, A2mError> {
        let log = self.logs.get_mut(&id).ok_or(A2mError::UnknownLog(id))?;
        let tail = log.len() as u64;
        if head > tail {
            return Err(A2mError::OutOfRange { seq: head, len: tail });
        }
        let marker = log.append(ep, &Truncation { id, nonce, head }.encode())?.clone();
        let triple = marker.attested(self.device, log.session()).encode();
        Ok(self.manifest.append(ep, &triple)?.clone())
    }

    /// Current `(head, tail)` of `id`, from the last MANIFEST marker.
    pub fn boundaries(&self, id: LogId) -> Result<(u64, u64), A2mError> {
        let tail = self.log(id)?.len() as u64;
        let head = self
            .manifest
            .entries()
            .iter()
            .rev()
            .filter_map(|e| AttestedMessage::decode(&e.ctx).ok())
            .filter_map(|m| Truncation::decode(&m.payload))
            .find(|t| t.id == id)
            .map_or(0, |t| t.head);
        Ok((head, tail))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, NetHandle};
    use crate::kernel::SessionKey;
    use crate::log::{chain_digest, ZERO_DIGEST};
    use std::sync::mpsc;

    const L: LogId = LogId(1);

    fn setup() -> (Endpoint, A2m) {
        let (tx, _rx) = mpsc::channel();
        let me = DeviceId(1);
        let cfg = DeviceConfig::new(me)
            .with_session(SessionId(100), me, SessionKey::new([1; 32]))
            .with_session(SessionId(101), me, SessionKey::new([2; 32]));
        let ep = Endpoint::connect(cfg, &NetHandle::new(tx, [])).unwrap();
        let mut a2m = A2m::new(me, SessionId(100));
        a2m.create_log(L, SessionId(101)).unwrap();
        (ep, a2m)
    }

    #[test]
    fn appends_get_consecutive_seqs() {
        let (mut ep, mut a) = setup();
        let seqs: Vec<u64> = (0..3).map(|i| a.append(&mut ep, L, &[i]).unwrap().seq).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
    }

    #[test]
    fn hundred_entry_chain_recomputes() {
        let (mut ep, mut a) = setup();
        for i in 0..100u32 {
            a.append(&mut ep, L, &i.to_le_bytes()).unwrap();
        }
        let mut prev = ZERO_DIGEST;
        for e in a.log(L).unwrap().entries() {
            prev = chain_digest(&e.ctx, e.seq, &prev);
            assert_eq!(prev, e.cum_digest);
        }
    }

    #[test]
    fn lookup_is_read_only_and_bounded() {
        let (mut ep, mut a) = setup();
        a.append(&mut ep, L, b"x").unwrap();
        let before = ep.kernel().session(SessionId(101)).unwrap().send_count();
        let e = a.lookup(L, 0).unwrap();
        assert_eq!(ep.kernel().session(SessionId(101)).unwrap().send_count(), before);
        assert_eq!(a.lookup(L, 1), Err(A2mError::OutOfRange { seq: 1, len: 1 }));
        a.verify_lookup(&mut ep, L, &e, 0, 1).unwrap();
    }

    #[test]
    fn truncation_moves_the_boundary() {
        let (mut ep, mut a) = setup();
        for i in 0..4u8 {
            a.append(&mut ep, L, &[i]).unwrap();
        }
        a.truncate(&mut ep, L, 2, 77).unwrap();
        let (head, tail) = a.boundaries(L).unwrap();
        assert_eq!((head, tail), (2, 5));
        let old = a.lookup(L, 1).unwrap();
        assert!(matches!(
            a.verify_lookup(&mut ep, L, &old, head, tail),
            Err(A2mError::OutOfBounds { seq: 1, .. })
        ));
        a.verify_lookup(&mut ep, L, &a.lookup(L, 3).unwrap(), head, tail).unwrap();
        assert!(matches!(a.truncate(&mut ep, L, 99, 1), Err(A2mError::OutOfRange { .. })));
    }

    #[test]
    fn same_nonce_twice_gives_distinct_manifest_entries() {
        let (mut ep, mut a) = setup();
        a.append(&mut ep, L, b"x").unwrap();
        let m1 = a.truncate(&mut ep, L, 1, 5).unwrap();
        let m2 = a.truncate(&mut ep, L, 1, 5).unwrap();
        assert_ne!(m1.seq, m2.seq);
        assert_ne!(m1.ctx, m2.ctx);
    }

    #[test]
    fn corrupted_entry_fails_attestation() {
        let (mut ep, mut a) = setup();
        a.append(&mut ep, L, b"genuine").unwrap();
        a.log_mut(L).unwrap().rewrite_entry_unchecked(0, b"forged!".to_vec());
        let e = a.lookup(L, 0).unwrap();
        assert_eq!(a.verify_lookup(&mut ep, L, &e, 0, 1), Err(A2mError::AuthFailure));
    }
}
