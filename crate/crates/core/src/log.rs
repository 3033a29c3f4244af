//! Tamper-evident log.
//!
//! Each entry is attested on a dedicated log session, so its sequence
//! number is the attestation counter, and chained into a cumulative digest:
//!
//! ```text
//! cum[i] = SHA-384(ctx[i] || seq_be64[i] || cum[i-1]),   cum[-1] = 0^48
//! ```

use sha2::{Digest, Sha384};

use crate::device::{DeviceError, Endpoint};
use crate::kernel::{AttestationTag, AttestedMessage, DeviceId, SessionId};

pub const DIGEST_LEN: usize = 48;
pub const ZERO_DIGEST: [u8; DIGEST_LEN] = [0; DIGEST_LEN];

pub fn chain_digest(ctx: &[u8], seq: u64, prev: &[u8; DIGEST_LEN]) -> [u8; DIGEST_LEN] {
    let mut h = Sha384::new();
    h.update(ctx);
    h.update(seq.to_be_bytes());
    h.update(prev);
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub seq: u64,
    pub ctx: Vec<u8>,
    pub tag: AttestationTag,
    pub cum_digest: [u8; DIGEST_LEN],
}

impl LogEntry {
    /// The attested message this entry was created from.
    pub fn attested(&self, device: DeviceId, session: SessionId) -> AttestedMessage {
        AttestedMessage {
            tag: self.tag,
            payload: self.ctx.clone(),
            device,
            session,
            counter: self.seq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LogError {
    /// The digest chain or an entry's attestation does not hold at `seq`.
    #[error("log chain broken at seq {seq}")]
    ChainBreak { seq: u64 },
}

#[derive(Debug, Clone)]
pub struct TamperEvidentLog {
    device: DeviceId,
    session: SessionId,
    entries: Vec<LogEntry>,
}

impl TamperEvidentLog {
    pub fn new(device: DeviceId, session: SessionId) -> Self {
        Self {
            device,
            session,
            entries: Vec::new(),
        }
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head_digest(&self) -> [u8; DIGEST_LEN] {
        self.entries.last().map_or(ZERO_DIGEST, |e| e.cum_digest)
    }

    pub fn append(&mut self, ep: &mut Endpoint, ctx: &[u8]) -> Result<&LogEntry, DeviceError> {
        let msg = ep.local_send(self.session, ctx)?;
        let cum_digest = chain_digest(ctx, msg.counter, &self.head_digest());
        self.entries.push(LogEntry {
            seq: msg.counter,
            ctx: msg.payload,
            tag: msg.tag,
            cum_digest,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Overwrites the stored context of entry `index` and nothing else.
    pub fn rewrite_entry_unchecked(&mut self, index: usize, ctx: Vec<u8>) {
        self.entries[index].ctx = ctx;
    }

    /// Overwrites an entry and recomputes every later digest, as a careful
    /// forger would. Tags cannot be recomputed without the kernel.
    pub fn rewrite_and_rechain(&mut self, index: usize, ctx: Vec<u8>) {
        self.entries[index].ctx = ctx;
        let mut prev = if index == 0 {
            ZERO_DIGEST
        } else {
            self.entries[index - 1].cum_digest
        };
        for e in &mut self.entries[index..] {
            e.cum_digest = chain_digest(&e.ctx, e.seq, &prev);
            prev = e.cum_digest;
        }
    }

    /// Drops entry `index`, keeping the stored digests of the others.
    pub fn remove_entry_unchecked(&mut self, index: usize) {
        self.entries.remove(index);
    }

    /// Digest-only check from scratch; sequence numbers must be contiguous.
    pub fn verify_chain(&self) -> Result<(), LogError> {
        verify_entries(&self.entries, 0, &ZERO_DIGEST, |_| true)
    }
}

/// Checks `entries` as the continuation of a chain whose last digest is
/// `prev` and whose next sequence number is `first_seq`. `tag_ok` decides
/// whether an entry's attestation is genuine.
pub fn verify_entries(
    entries: &[LogEntry],
    first_seq: u64,
    prev: &[u8; DIGEST_LEN],
    mut tag_ok: impl FnMut(&LogEntry) -> bool,
) -> Result<(), LogError> {
    let mut prev = *prev;
    for (i, e) in entries.iter().enumerate() {
        let expected_seq = first_seq + i as u64;
        if e.seq != expected_seq || chain_digest(&e.ctx, e.seq, &prev) != e.cum_digest || !tag_ok(e) {
            return Err(LogError::ChainBreak { seq: expected_seq });
        }
        prev = e.cum_digest;
    }
    Ok(())
}
