//! Chain Replication with proof-of-execution layers.
//!
//! Node `i` talks to node `i + 1` over link session `i`; every node holds
//! every link key so it can check earlier hops with the stateless tag check.
//! The message a node forwards wraps, as its last field, the attested
//! message it received. A node therefore sees one layer per upstream hop
//! and checks that layer `k` came from device `k` on link `k` and carries
//! the same request and commit index it computes itself. The first
//! disagreeing layer names the liar.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceConfig, DeviceError, Endpoint};
use crate::kernel::{AttestedMessage, DeviceId, SessionId, SessionKey};
use crate::net::{NetConfig, SimNet};
use crate::protocols::client::{ClientReply, QuorumClient, ReplySigner, RequestId};

pub const CHAIN_BASE: u32 = 0x5000;

/// Session from node `i` to node `i + 1`; the tail's own is its reply log.
pub fn link_session(i: usize) -> SessionId {
    SessionId(CHAIN_BASE + i as u32)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainRecord {
    pub req: RequestId,
    pub index: u64,
    /// Encoded attested message from the previous hop; empty at the head.
    pub inner: Vec<u8>,
}

impl ChainRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![b'C'];
        self.req.encode_into(&mut out);
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&(self.inner.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.inner);
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.first() != Some(&b'C') || b.len() < 25 {
            return None;
        }
        let len = u32::from_be_bytes(b[21..25].try_into().ok()?) as usize;
        if b.len() != 25 + len {
            return None;
        }
        Some(Self {
            req: RequestId::decode(&b[1..13])?,
            index: u64::from_be_bytes(b[13..21].try_into().unwrap()),
            inner: b[25..].to_vec(),
        })
    }
}

pub fn extract_index(payload: &[u8], req: RequestId) -> Option<Vec<u8>> {
    let r = ChainRecord::decode(payload)?;
    (r.req == req).then(|| r.index.to_be_bytes().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainBehavior {
    #[default]
    Honest,
    /// Reports a commit index one too high for its `round`-th request.
    LieIndex { round: u64 },
    /// Reports a different request id for its `round`-th request.
    AlterRequest { round: u64 },
    /// Flips a bit of the wrapped upstream layer.
    ForgeInner { round: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    Malformed,
    BadLayerTag,
    WrongOrigin,
    IndexMismatch,
    RequestMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("chain validation failed at position {position} ({reason:?}), detected by node {detected_at}")]
pub struct ChainValidationFailure {
    pub detected_at: usize,
    pub position: usize,
    pub reason: FailureReason,
}

#[derive(Debug)]
pub struct ChainNode {
    position: usize,
    devices: Vec<DeviceId>,
    behavior: ChainBehavior,
    counter: u64,
    commits: Vec<(RequestId, u64)>,
    failures: Vec<ChainValidationFailure>,
    signer: ReplySigner,
    outbox: Vec<ClientReply>,
    rounds: u64,
    halted: bool,
}

impl ChainNode {
    pub fn new(position: usize, devices: Vec<DeviceId>, behavior: ChainBehavior, run_seed: u64) -> Self {
        let signer = ReplySigner::derived(devices[position], run_seed);
        Self {
            position,
            devices,
            behavior,
            counter: 0,
            commits: Vec::new(),
            failures: Vec::new(),
            signer,
            outbox: Vec::new(),
            rounds: 0,
            halted: false,
        }
    }

    pub fn is_tail(&self) -> bool {
        self.position + 1 == self.devices.len()
    }

    pub fn commits(&self) -> &[(RequestId, u64)] {
        &self.commits
    }

    pub fn failures(&self) -> &[ChainValidationFailure] {
        &self.failures
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn reply_key(&self) -> ed25519_dalek::VerifyingKey {
        self.signer.public()
    }

    pub fn take_outbox(&mut self) -> Vec<ClientReply> {
        std::mem::take(&mut self.outbox)
    }

    /// Head entry point for a client request.
    pub fn submit(&mut self, ep: &mut Endpoint, req: RequestId) -> Result<(), DeviceError> {
        if self.position != 0 || self.halted {
            return Ok(());
        }
        self.apply_and_forward(ep, req, None)
    }

    fn apply_and_forward(&mut self, ep: &mut Endpoint, req: RequestId, inbound: Option<&AttestedMessage>) -> Result<(), DeviceError> {
        self.counter += 1;
        self.commits.push((req, self.counter));
        let round = self.rounds;
        self.rounds += 1;
        let mut rec = ChainRecord {
            req,
            index: self.counter,
            inner: inbound.map(AttestedMessage::encode).unwrap_or_default(),
        };
        match self.behavior {
            ChainBehavior::LieIndex { round: r } if r == round => rec.index += 1,
            ChainBehavior::AlterRequest { round: r } if r == round => rec.req.seq ^= 1 << 20,
            ChainBehavior::ForgeInner { round: r } if r == round && !rec.inner.is_empty() => {
                let mid = rec.inner.len() / 2;
                rec.inner[mid] ^= 1;
            }
            _ => {}
        }
        let session = link_session(self.position);
        if self.is_tail() {
            let out = ep.local_send(session, &rec.encode())?;
            self.outbox.push(self.signer.sign(&out));
        } else {
            ep.auth_send(session, &rec.encode())?;
        }
        Ok(())
    }

    pub fn on_deliver(&mut self, ep: &mut Endpoint) -> Result<(), DeviceError> {
        if self.position == 0 {
            ep.poll_all();
            return Ok(());
        }
        for m in ep.poll(link_session(self.position - 1), usize::MAX) {
            if self.halted {
                break;
            }
            match self.validate(ep, &m) {
                Ok(req) => self.apply_and_forward(ep, req, Some(&m))?,
                Err(f) => {
                    self.failures.push(f);
                    self.halted = true;
                }
            }
        }
        Ok(())
    }

    /// Peels every layer of `outer` (already kernel-verified) and checks it.
    fn validate(&self, ep: &mut Endpoint, outer: &AttestedMessage) -> Result<RequestId, ChainValidationFailure> {
        let fail = |position, reason| ChainValidationFailure {
            detected_at: self.position,
            position,
            reason,
        };
        let mut layers: Vec<ChainRecord> = Vec::with_capacity(self.position);
        let mut cur = outer.clone();
        for k in (0..self.position).rev() {
            if cur.device != self.devices[k] || cur.session != link_session(k) {
                return Err(fail(k + 1, FailureReason::WrongOrigin));
            }
            if k + 1 < self.position && ep.verify_tag(link_session(k), &cur).is_err() {
                return Err(fail(k + 1, FailureReason::BadLayerTag));
            }
            let rec = ChainRecord::decode(&cur.payload).ok_or(fail(k, FailureReason::Malformed))?;
            let next = if k > 0 {
                Some(AttestedMessage::decode(&rec.inner).map_err(|_| fail(k, FailureReason::Malformed))?)
            } else if rec.inner.is_empty() {
                None
            } else {
                return Err(fail(0, FailureReason::Malformed));
            };
            layers.push(rec);
            if let Some(n) = next {
                cur = n;
            }
        }
        layers.reverse();
        let req = layers[0].req;
        let expected = self.counter + 1;
        for (k, l) in layers.iter().enumerate() {
            if l.req != req {
                return Err(fail(k, FailureReason::RequestMismatch));
            }
            if l.index != expected {
                return Err(fail(k, FailureReason::IndexMismatch));
            }
        }
        Ok(req)
    }
}

fn link_keys(n: usize, seed: u64) -> Vec<SessionKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6368_6169_6e);
    (0..n)
        .map(|_| {
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            SessionKey::new(k)
        })
        .collect()
}

/// `n` nodes on a [`SimNet`] and one client that accepts only tail replies.
pub struct ChainCluster {
    pub net: SimNet,
    pub nodes: Vec<ChainNode>,
    pub client: QuorumClient,
    devices: Vec<DeviceId>,
    reply_times: BTreeMap<RequestId, u64>,
}

impl ChainCluster {
    pub fn new(n: usize, behaviors: &[ChainBehavior], seed: u64, net_cfg: NetConfig) -> Result<Self, DeviceError> {
        Self::with_delay(n, behaviors, seed, net_cfg, Duration::ZERO)
    }

    pub fn with_delay(
        n: usize,
        behaviors: &[ChainBehavior],
        seed: u64,
        net_cfg: NetConfig,
        delay: Duration,
    ) -> Result<Self, DeviceError> {
        assert!(n >= 2, "a chain needs a head and a tail");
        let devices: Vec<DeviceId> = (1..=n as u32).map(DeviceId).collect();
        let keys = link_keys(n, seed);
        let mut net = SimNet::new(devices.iter().copied(), net_cfg);
        let handle = net.handle();
        let mut nodes = Vec::with_capacity(n);
        for (i, &dev) in devices.iter().enumerate() {
            let mut dc = DeviceConfig::new(dev).with_delay(delay);
            for (j, key) in keys.iter().enumerate() {
                // the owner sends downstream, everyone else hears from the owner
                let peer = if j == i { *devices.get(i + 1).unwrap_or(&dev) } else { devices[j] };
                dc = dc.with_session(link_session(j), peer, key.clone());
            }
            net.attach(Endpoint::connect(dc, &handle)?);
            let b = behaviors.get(i).copied().unwrap_or_default();
            nodes.push(ChainNode::new(i, devices.clone(), b, seed));
        }
        let tail = *devices.last().unwrap();
        let client = QuorumClient::new(1, 1, BTreeMap::from([(tail, nodes[n - 1].reply_key())])).requiring(tail);
        Ok(Self {
            net,
            nodes,
            client,
            devices,
            reply_times: BTreeMap::new(),
        })
    }

    pub fn submit(&mut self) -> Result<RequestId, DeviceError> {
        let req = self.client.next_request();
        let ep = self.net.endpoint_mut(self.devices[0]).unwrap();
        self.nodes[0].submit(ep, req)?;
        Ok(req)
    }

    pub fn run(&mut self) -> Result<(), DeviceError> {
        while let Some(o) = self.net.step() {
            let Some(d) = o.device else { continue };
            let i = self.devices.iter().position(|x| *x == d).unwrap();
            let ep = self.net.endpoint_mut(d).unwrap();
            self.nodes[i].on_deliver(ep)?;
            let now = ep.clock();
            for r in self.nodes[i].take_outbox() {
                if let Ok(Some((req, _))) = self.client.on_reply(&r, extract_index) {
                    self.reply_times.insert(req, now);
                }
            }
        }
        Ok(())
    }

    /// Tail clock at the moment the client's reply for `req` was signed.
    pub fn reply_time(&self, req: RequestId) -> Option<u64> {
        self.reply_times.get(&req).copied()
    }

    pub fn head_clock(&self) -> u64 {
        self.net.endpoint(self.devices[0]).unwrap().clock()
    }

    pub fn commit_sequences(&self) -> Vec<Vec<u64>> {
        self.nodes
            .iter()
            .map(|n| n.commits().iter().map(|c| c.1).collect())
            .collect()
    }

    pub fn failures(&self) -> Vec<ChainValidationFailure> {
        self.nodes.iter().flat_map(|n| n.failures().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_codec() {
        let r = ChainRecord {
            req: RequestId { client: 1, seq: 4 },
            index: 9,
            inner: vec![1, 2, 3],
        };
        assert_eq!(ChainRecord::decode(&r.encode()), Some(r));
        assert_eq!(ChainRecord::decode(b"C"), None);
    }

    #[test]
    fn honest_chain_agrees_and_client_accepts() {
        let mut c = ChainCluster::new(3, &[], 1, NetConfig::default()).unwrap();
        let reqs: Vec<_> = (0..20).map(|_| c.submit().unwrap()).collect();
        c.run().unwrap();
        let seqs = c.commit_sequences();
        assert_eq!(seqs[0], (1..=20).collect::<Vec<_>>());
        assert!(seqs.iter().all(|s| *s == seqs[0]));
        for (i, r) in reqs.iter().enumerate() {
            assert_eq!(c.client.result(*r).unwrap(), &(i as u64 + 1).to_be_bytes());
        }
        assert!(c.failures().is_empty());
    }

    #[test]
    fn mid_chain_lie_caught_downstream() {
        for b in [
            ChainBehavior::LieIndex { round: 2 },
            ChainBehavior::AlterRequest { round: 2 },
            ChainBehavior::ForgeInner { round: 2 },
        ] {
            let mut c = ChainCluster::new(3, &[ChainBehavior::Honest, b], 5, NetConfig::default()).unwrap();
            let reqs: Vec<_> = (0..5).map(|_| c.submit().unwrap()).collect();
            c.run().unwrap();
            let f = c.failures();
            assert_eq!(f.len(), 1, "{b:?}");
            assert_eq!((f[0].detected_at, f[0].position), (2, 1), "{b:?}");
            assert!(c.client.result(reqs[2]).is_err());
            assert_eq!(c.client.accepted().len(), 2);
        }
    }

    #[test]
    fn lying_head_caught_by_second_node() {
        let mut c = ChainCluster::new(4, &[ChainBehavior::LieIndex { round: 0 }], 5, NetConfig::default()).unwrap();
        c.submit().unwrap();
        c.run().unwrap();
        let f = c.failures();
        assert_eq!((f[0].detected_at, f[0].position, f[0].reason), (1, 0, FailureReason::IndexMismatch));
    }
}
