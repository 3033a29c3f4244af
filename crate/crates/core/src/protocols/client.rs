//! Client role.
//!
//! Clients hold no session keys. Each replica owns a reply-signing keypair
//! whose public half is distributed to clients; a reply is an attested
//! message from the replica's device plus a signature over its encoding.
//! A client accepts a value once `quorum` distinct replicas signed replies
//! carrying that value for one of its own requests.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};

use crate::kernel::{AttestedMessage, DeviceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId {
    pub client: u32,
    pub seq: u64,
}

impl RequestId {
    pub const LEN: usize = 12;

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.client.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        (b.len() >= Self::LEN).then(|| Self {
            client: u32::from_be_bytes(b[..4].try_into().unwrap()),
            seq: u64::from_be_bytes(b[4..12].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientReply {
    pub replica: DeviceId,
    pub attested: Vec<u8>,
    pub signature: [u8; 64],
}

/// Reply-signing half of a replica, provisioned at bootstrap.
#[derive(Debug, Clone)]
pub struct ReplySigner {
    device: DeviceId,
    key: SigningKey,
}

impl ReplySigner {
    pub fn new(device: DeviceId, seed: [u8; 32]) -> Self {
        Self {
            device,
            key: SigningKey::from_bytes(&seed),
        }
    }

    /// Deterministic key from a run seed.
    pub fn derived(device: DeviceId, run_seed: u64) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&run_seed.to_be_bytes());
        seed[8..12].copy_from_slice(&device.0.to_be_bytes());
        seed[12..16].copy_from_slice(b"crep");
        Self::new(device, seed)
    }

    pub fn public(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn sign(&self, msg: &AttestedMessage) -> ClientReply {
        let attested = msg.encode();
        ClientReply {
            replica: self.device,
            signature: self.key.sign(&attested).to_bytes(),
            attested,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ReplyError {
    #[error("reply from a replica with no known key")]
    UnknownReplica,
    #[error("reply signature does not verify")]
    BadSignature,
    #[error("reply frame is malformed")]
    Malformed,
    #[error("attested frame was produced by a different device")]
    WrongDevice,
    #[error("reply does not reference one of this client's requests")]
    ForeignRequest,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("no quorum for {0:?}")]
pub struct QuorumTimeout(pub RequestId);

/// Pulls the value for `req` out of an attested reply payload.
pub type Extract = fn(&[u8], RequestId) -> Option<Vec<u8>>;

#[derive(Debug, Clone)]
pub struct QuorumClient {
    id: u32,
    quorum: usize,
    keys: BTreeMap<DeviceId, VerifyingKey>,
    required: Option<DeviceId>,
    next_seq: u64,
    outstanding: BTreeSet<RequestId>,
    votes: BTreeMap<RequestId, BTreeMap<Vec<u8>, BTreeSet<DeviceId>>>,
    accepted: BTreeMap<RequestId, Vec<u8>>,
    ignored: u64,
}

impl QuorumClient {
    pub fn new(id: u32, quorum: usize, keys: BTreeMap<DeviceId, VerifyingKey>) -> Self {
        Self {
            id,
            quorum,
            keys,
            required: None,
            next_seq: 0,
            outstanding: BTreeSet::new(),
            votes: BTreeMap::new(),
            accepted: BTreeMap::new(),
            ignored: 0,
        }
    }

    /// Only accept once `device` is among the matching replies.
    pub fn requiring(mut self, device: DeviceId) -> Self {
        self.required = Some(device);
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn next_request(&mut self) -> RequestId {
        let r = RequestId {
            client: self.id,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.outstanding.insert(r);
        r
    }

    pub fn accepted(&self) -> &BTreeMap<RequestId, Vec<u8>> {
        &self.accepted
    }

    pub fn outstanding(&self) -> impl Iterator<Item = &RequestId> {
        self.outstanding.iter()
    }

    pub fn ignored_replies(&self) -> u64 {
        self.ignored
    }

    pub fn result(&self, req: RequestId) -> Result<&[u8], QuorumTimeout> {
        self.accepted.get(&req).map(Vec::as_slice).ok_or(QuorumTimeout(req))
    }

    /// Records one reply. Returns the newly accepted `(request, value)`.
    pub fn on_reply(&mut self, reply: &ClientReply, extract: Extract) -> Result<Option<(RequestId, Vec<u8>)>, ReplyError> {
        let r = self.check(reply, extract);
        if r.is_err() {
            self.ignored += 1;
        }
        r
    }

    fn check(&mut self, reply: &ClientReply, extract: Extract) -> Result<Option<(RequestId, Vec<u8>)>, ReplyError> {
        let key = self.keys.get(&reply.replica).ok_or(ReplyError::UnknownReplica)?;
        key.verify(&reply.attested, &Signature::from_bytes(&reply.signature))
            .map_err(|_| ReplyError::BadSignature)?;
        let msg = AttestedMessage::decode(&reply.attested).map_err(|_| ReplyError::Malformed)?;
        if msg.device != reply.replica {
            return Err(ReplyError::WrongDevice);
        }
        let mut newly = None;
        let mut matched = false;
        let mine: Vec<RequestId> = self.outstanding.iter().copied().collect();
        for req in mine {
            let Some(value) = extract(&msg.payload, req) else { continue };
            matched = true;
            let voters = self.votes.entry(req).or_default().entry(value.clone()).or_default();
            voters.insert(reply.replica);
            let has_required = self.required.map_or(true, |d| voters.contains(&d));
            if voters.len() >= self.quorum && has_required {
                self.outstanding.remove(&req);
                self.accepted.insert(req, value.clone());
                newly = Some((req, value));
            }
        }
        if !matched {
            return Err(ReplyError::ForeignRequest);
        }
        Ok(newly)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Kernel, SessionId, SessionKey};

    fn extract(payload: &[u8], req: RequestId) -> Option<Vec<u8>> {
        (RequestId::decode(payload)? == req).then(|| payload[12..].to_vec())
    }

    fn reply(signer: &ReplySigner, req: RequestId, value: u8) -> ClientReply {
        let mut k = Kernel::new(signer.device);
        k.provision_session(SessionId(1), SessionKey::new([0; 32])).unwrap();
        let mut p = Vec::new();
        req.encode_into(&mut p);
        p.push(value);
        signer.sign(&k.attest(SessionId(1), &p).unwrap())
    }

    fn setup() -> (Vec<ReplySigner>, QuorumClient) {
        let signers: Vec<ReplySigner> = (1..=3).map(|d| ReplySigner::derived(DeviceId(d), 9)).collect();
        let keys = signers.iter().map(|s| (s.device, s.public())).collect();
        (signers, QuorumClient::new(7, 2, keys))
    }

    #[test]
    fn pair_beats_the_odd_one_out() {
        let (s, mut c) = setup();
        let req = c.next_request();
        assert_eq!(c.on_reply(&reply(&s[0], req, 5), extract).unwrap(), None);
        assert_eq!(c.on_reply(&reply(&s[1], req, 6), extract).unwrap(), None);
        assert_eq!(c.on_reply(&reply(&s[2], req, 5), extract).unwrap(), Some((req, vec![5])));
        assert_eq!(c.result(req).unwrap(), &[5]);
    }

    #[test]
    fn one_reply_is_not_enough_and_repeats_do_not_count() {
        let (s, mut c) = setup();
        let req = c.next_request();
        c.on_reply(&reply(&s[0], req, 5), extract).unwrap();
        c.on_reply(&reply(&s[0], req, 5), extract).unwrap();
        assert!(c.result(req).is_err());
    }

    #[test]
    fn foreign_and_forged_replies_ignored() {
        let (s, mut c) = setup();
        let req = c.next_request();
        let other = RequestId { client: 8, seq: 0 };
        assert_eq!(c.on_reply(&reply(&s[0], other, 5), extract), Err(ReplyError::ForeignRequest));
        let mut bad = reply(&s[1], req, 5);
        bad.signature[0] ^= 1;
        assert_eq!(c.on_reply(&bad, extract), Err(ReplyError::BadSignature));
        let mut spoof = reply(&s[1], req, 5);
        spoof.replica = DeviceId(3);
        assert_eq!(c.on_reply(&spoof, extract), Err(ReplyError::BadSignature));
        assert_eq!(c.ignored_replies(), 3);
    }

    #[test]
    fn required_member_gates_acceptance() {
        let (s, c) = setup();
        let mut c = c.requiring(DeviceId(3));
        let req = c.next_request();
        c.on_reply(&reply(&s[0], req, 1), extract).unwrap();
        assert_eq!(c.on_reply(&reply(&s[1], req, 1), extract).unwrap(), None);
        assert!(c.on_reply(&reply(&s[2], req, 1), extract).unwrap().is_some());
    }
}
