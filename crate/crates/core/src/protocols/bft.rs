//! Replicated counter tolerating `f` Byzantine replicas out of `2f + 1`.
//!
//! Every replica owns a group session that all replicas share a key for.
//! A message attested once on that session and transmitted to every other
//! replica is a multicast that cannot carry two different payloads under
//! one counter.
//!
//! Leader: executes a batch, attests one `P` message, sends it to all
//! followers and replies to the client after `f` follower acks that match
//! its own outputs (one per follower id, first write wins).
//!
//! Follower: checks each leader output against its own counter, applies
//! each request once, then attests an `F` message (its outputs plus the
//! leader frame) to the leader and every other follower. Receivers of an
//! `F` feed the embedded leader frame to their own kernel, so a leader that
//! crashes mid-broadcast or skips a follower cannot starve it, and a second
//! conflicting proposal for an applied request is flagged.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceConfig, DeviceError, Endpoint};
use crate::kernel::{AttestedMessage, DeviceId, SessionId, SessionKey};
use crate::net::{FaultAction, FaultRule, FaultSchedule, NetConfig, SimNet};
use crate::protocols::client::{ClientReply, QuorumClient, ReplySigner, RequestId};
use crate::wire::WireFrame;

pub const GROUP_BASE: u32 = 0x4000;
pub const DEFAULT_EXEC_COST: Duration = Duration::from_nanos(500);

/// Request id used by an equivocating leader for its fabricated request.
pub const PHANTOM_CLIENT: u32 = u32::MAX;

pub fn group_session(replica: usize) -> SessionId {
    SessionId(GROUP_BASE + replica as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BftError {
    #[error("BFT needs n = 2f + 1 replicas, got n = {n}, f = {f}")]
    BadConfig { n: usize, f: usize },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone)]
pub struct BftConfig {
    pub replicas: Vec<DeviceId>,
    pub f: usize,
    pub exec_cost: Duration,
    pub attest_delay: Duration,
    pub run_seed: u64,
}

impl BftConfig {
    pub fn new(f: usize, run_seed: u64) -> Self {
        Self {
            replicas: (1..=2 * f as u32 + 1).map(DeviceId).collect(),
            f,
            exec_cost: DEFAULT_EXEC_COST,
            attest_delay: Duration::ZERO,
            run_seed,
        }
    }

    pub fn with_delay(mut self, d: Duration) -> Self {
        self.attest_delay = d;
        self
    }

    pub fn leader(&self) -> DeviceId {
        self.replicas[0]
    }

    pub fn quorum(&self) -> usize {
        self.f + 1
    }

    pub fn validate(&self) -> Result<(), BftError> {
        if self.replicas.len() != 2 * self.f + 1 || self.f == 0 {
            return Err(BftError::BadConfig {
                n: self.replicas.len(),
                f: self.f,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivocationVariant {
    /// Same request, two different outputs.
    Value,
    /// Same output, two different requests.
    Request,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Leader sends proposal `round` only to the listed replica indices and
    /// then crashes.
    CrashMidBroadcast { round: u64, deliver_to: Vec<usize> },
    /// Leader attests two conflicting proposals for `round`.
    LeaderEquivocate {
        round: u64,
        first: Vec<usize>,
        second: Vec<usize>,
        variant: EquivocationVariant,
    },
    /// Leader skips one counter value at `round`.
    LeaderWrongOutput { round: u64 },
    /// Follower reports a wrong output for its `round`-th applied request.
    FollowerWrongOutput { round: u64 },
    /// Follower keeps sending clients its first signed reply.
    StaleReplies,
}

impl Behavior {
    pub fn is_byzantine(&self) -> bool {
        !matches!(self, Self::Honest | Self::CrashMidBroadcast { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Entry {
    pub req: RequestId,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BftMessage {
    Proposal(Vec<Entry>),
    Forward { entries: Vec<Entry>, leader_frame: Vec<u8> },
}

impl BftMessage {
    pub fn encode(&self) -> Vec<u8> {
        let (tag, entries) = match self {
            Self::Proposal(e) => (b'P', e),
            Self::Forward { entries, .. } => (b'F', entries),
        };
        let mut out = vec![tag];
        out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
        for e in entries {
            e.req.encode_into(&mut out);
            out.extend_from_slice(&e.output.to_be_bytes());
        }
        if let Self::Forward { leader_frame, .. } = self {
            out.extend_from_slice(&(leader_frame.len() as u32).to_be_bytes());
            out.extend_from_slice(leader_frame);
        }
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        let (&tag, rest) = b.split_first()?;
        let n = u32::from_be_bytes(rest.get(..4)?.try_into().ok()?) as usize;
        let mut rest = &rest[4..];
        let mut entries = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let chunk = rest.get(..20)?;
            entries.push(Entry {
                req: RequestId::decode(chunk)?,
                output: u64::from_be_bytes(chunk[12..20].try_into().ok()?),
            });
            rest = &rest[20..];
        }
        match tag {
            b'P' if rest.is_empty() => Some(Self::Proposal(entries)),
            b'F' => {
                let len = u32::from_be_bytes(rest.get(..4)?.try_into().ok()?) as usize;
                let frame = rest.get(4..)?;
                (frame.len() == len).then(|| Self::Forward {
                    entries,
                    leader_frame: frame.to_vec(),
                })
            }
            _ => None,
        }
    }

    pub fn entries(&self) -> &[Entry] {
        match self {
            Self::Proposal(e) | Self::Forward { entries: e, .. } => e,
        }
    }
}

/// Client-side view of a reply payload: the output for `req`, if present.
pub fn extract_output(payload: &[u8], req: RequestId) -> Option<Vec<u8>> {
    BftMessage::decode(payload)?
        .entries()
        .iter()
        .find(|e| e.req == req)
        .map(|e| e.output.to_be_bytes().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accusation {
    Equivocation {
        accused: DeviceId,
        req: RequestId,
        first: u64,
        second: u64,
    },
    SenderStateMismatch {
        accused: DeviceId,
        req: RequestId,
        expected: u64,
        found: u64,
    },
}

impl Accusation {
    pub fn accused(&self) -> DeviceId {
        match self {
            Self::Equivocation { accused, .. } | Self::SenderStateMismatch { accused, .. } => *accused,
        }
    }
}

#[derive(Debug)]
pub struct Replica {
    cfg: BftConfig,
    index: usize,
    device: DeviceId,
    behavior: Behavior,
    counter: u64,
    applied: BTreeMap<RequestId, u64>,
    order: Vec<Entry>,
    proposals: BTreeMap<RequestId, AttestedMessage>,
    acks: BTreeMap<RequestId, BTreeSet<DeviceId>>,
    committed: BTreeMap<RequestId, u64>,
    suspects: BTreeSet<DeviceId>,
    accusations: Vec<Accusation>,
    pending: Vec<(DeviceId, Entry)>,
    signer: ReplySigner,
    outbox: Vec<(u32, ClientReply)>,
    first_reply: Option<ClientReply>,
    rounds: u64,
    applied_count: u64,
    halted: bool,
}

impl Replica {
    pub fn new(cfg: BftConfig, index: usize, behavior: Behavior) -> Self {
        let device = cfg.replicas[index];
        let signer = ReplySigner::derived(device, cfg.run_seed);
        Self {
            cfg,
            index,
            device,
            behavior,
            counter: 0,
            applied: BTreeMap::new(),
            order: Vec::new(),
            proposals: BTreeMap::new(),
            acks: BTreeMap::new(),
            committed: BTreeMap::new(),
            suspects: BTreeSet::new(),
            accusations: Vec::new(),
            pending: Vec::new(),
            signer,
            outbox: Vec::new(),
            first_reply: None,
            rounds: 0,
            applied_count: 0,
            halted: false,
        }
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn is_leader(&self) -> bool {
        self.index == 0
    }

    pub fn behavior(&self) -> &Behavior {
        &self.behavior
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Requests in the order this replica applied them, with outputs.
    pub fn order(&self) -> &[Entry] {
        &self.order
    }

    pub fn accusations(&self) -> &[Accusation] {
        &self.accusations
    }

    pub fn committed(&self) -> &BTreeMap<RequestId, u64> {
        &self.committed
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn reply_key(&self) -> ed25519_dalek::VerifyingKey {
        self.signer.public()
    }

    pub fn take_outbox(&mut self) -> Vec<(u32, ClientReply)> {
        std::mem::take(&mut self.outbox)
    }

    fn accuse(&mut self, a: Accusation) {
        self.suspects.insert(a.accused());
        self.accusations.push(a);
    }

    fn others(&self) -> Vec<DeviceId> {
        self.cfg.replicas.iter().copied().filter(|d| *d != self.device).collect()
    }

    fn reply(&mut self, msg: &AttestedMessage, entries: &[Entry]) {
        let fresh = self.signer.sign(msg);
        let reply = match (&self.behavior, &self.first_reply) {
            (Behavior::StaleReplies, Some(first)) => first.clone(),
            _ => fresh,
        };
        self.first_reply.get_or_insert_with(|| reply.clone());
        let clients: BTreeSet<u32> = entries.iter().map(|e| e.req.client).collect();
        for c in clients {
            self.outbox.push((c, reply.clone()));
        }
    }

    /// Leader entry point: orders and executes `reqs` as one batch.
    pub fn propose(&mut self, ep: &mut Endpoint, reqs: &[RequestId]) -> Result<(), BftError> {
        if !self.is_leader() || self.halted || reqs.is_empty() {
            return Ok(());
        }
        let round = self.rounds;
        self.rounds += 1;
        let mut entries = Vec::with_capacity(reqs.len());
        for &req in reqs {
            ep.charge(self.cfg.exec_cost);
            self.counter += 1;
            if self.behavior == (Behavior::LeaderWrongOutput { round }) {
                self.counter += 1;
            }
            self.applied.insert(req, self.counter);
            let e = Entry {
                req,
                output: self.counter,
            };
            self.order.push(e);
            entries.push(e);
        }
        let session = group_session(self.index);
        let followers = self.others();
        let pick = |idx: &[usize]| -> Vec<DeviceId> { idx.iter().filter_map(|i| self.cfg.replicas.get(*i).copied()).collect() };
        match self.behavior.clone() {
            Behavior::LeaderEquivocate {
                round: r,
                first,
                second,
                variant,
            } if r == round => {
                let m1 = ep.local_send(session, &BftMessage::Proposal(entries.clone()).encode())?;
                let alt: Vec<Entry> = entries
                    .iter()
                    .map(|e| match variant {
                        EquivocationVariant::Value => Entry {
                            req: e.req,
                            output: e.output + 1,
                        },
                        EquivocationVariant::Request => Entry {
                            req: RequestId {
                                client: PHANTOM_CLIENT,
                                seq: e.req.seq,
                            },
                            output: e.output,
                        },
                    })
                    .collect();
                let m2 = ep.local_send(session, &BftMessage::Proposal(alt).encode())?;
                for d in pick(&first) {
                    ep.transmit(d, &m1)?;
                }
                for d in pick(&second) {
                    ep.transmit(d, &m2)?;
                }
                self.record_proposal(&m1, &entries);
            }
            Behavior::CrashMidBroadcast { round: r, deliver_to } if r == round => {
                let m = ep.local_send(session, &BftMessage::Proposal(entries.clone()).encode())?;
                for d in pick(&deliver_to) {
                    ep.transmit(d, &m)?;
                }
                self.halted = true;
            }
            _ => {
                let m = ep.local_send(session, &BftMessage::Proposal(entries.clone()).encode())?;
                for d in followers {
                    ep.transmit(d, &m)?;
                }
                self.record_proposal(&m, &entries);
            }
        }
        Ok(())
    }

    fn record_proposal(&mut self, m: &AttestedMessage, entries: &[Entry]) {
        for e in entries {
            self.proposals.insert(e.req, m.clone());
        }
    }

    /// Drains and handles every verified message in the inbox.
    pub fn on_deliver(&mut self, ep: &mut Endpoint) -> Result<(), BftError> {
        if self.halted {
            return Ok(());
        }
        loop {
            let msgs = ep.poll_all();
            if msgs.is_empty() {
                break;
            }
            for m in msgs {
                self.handle(ep, m)?;
            }
            self.check_pending();
        }
        Ok(())
    }

    fn handle(&mut self, ep: &mut Endpoint, m: AttestedMessage) -> Result<(), BftError> {
        let leader = self.cfg.leader();
        let Some(decoded) = BftMessage::decode(&m.payload) else {
            return Ok(());
        };
        match decoded {
            BftMessage::Proposal(entries) if m.device == leader && !self.is_leader() => {
                self.on_proposal(ep, &m, entries)
            }
            BftMessage::Forward { entries, leader_frame } if m.device != leader => {
                if !self.is_leader() {
                    if let Ok(f) = WireFrame::decode(&leader_frame) {
                        if f.device == leader && f.session == group_session(0) {
                            // stale copies are expected and harmless
                            let _ = ep.ingest(f);
                        }
                    }
                }
                if self.suspects.contains(&m.device) {
                    return Ok(());
                }
                if self.is_leader() {
                    self.on_ack(m.device, &entries);
                } else {
                    self.pending.extend(entries.into_iter().map(|e| (m.device, e)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn on_proposal(&mut self, ep: &mut Endpoint, m: &AttestedMessage, entries: Vec<Entry>) -> Result<(), BftError> {
        let leader = self.cfg.leader();
        if self.suspects.contains(&leader) {
            return Ok(());
        }
        let mut mine = Vec::new();
        for e in entries {
            if let Some(&prev) = self.applied.get(&e.req) {
                if prev != e.output {
                    self.accuse(Accusation::Equivocation {
                        accused: leader,
                        req: e.req,
                        first: prev,
                        second: e.output,
                    });
                    break;
                }
                continue;
            }
            let expected = self.counter + 1;
            if e.output != expected {
                self.accuse(Accusation::SenderStateMismatch {
                    accused: leader,
                    req: e.req,
                    expected,
                    found: e.output,
                });
                break;
            }
            ep.charge(self.cfg.exec_cost);
            self.counter = expected;
            self.applied.insert(e.req, expected);
            self.order.push(e);
            let mut reported = expected;
            if self.behavior == (Behavior::FollowerWrongOutput { round: self.applied_count }) {
                reported += 1;
            }
            self.applied_count += 1;
            mine.push(Entry {
                req: e.req,
                output: reported,
            });
        }
        if mine.is_empty() {
            return Ok(());
        }
        let fwd = BftMessage::Forward {
            entries: mine.clone(),
            leader_frame: m.encode(),
        };
        let out = ep.local_send(group_session(self.index), &fwd.encode())?;
        for d in self.others() {
            ep.transmit(d, &out)?;
        }
        self.reply(&out, &mine);
        Ok(())
    }

    fn on_ack(&mut self, from: DeviceId, entries: &[Entry]) {
        let mut newly = Vec::new();
        for e in entries {
            match self.applied.get(&e.req).copied() {
                Some(o) if o == e.output => {
                    let set = self.acks.entry(e.req).or_default();
                    if set.insert(from) && set.len() >= self.cfg.f && !self.committed.contains_key(&e.req) {
                        self.committed.insert(e.req, o);
                        newly.push(*e);
                    }
                }
                other => {
                    self.accuse(Accusation::SenderStateMismatch {
                        accused: from,
                        req: e.req,
                        expected: other.unwrap_or(0),
                        found: e.output,
                    });
                    break;
                }
            }
        }
        let mut by_msg: BTreeMap<u64, (AttestedMessage, Vec<Entry>)> = BTreeMap::new();
        for e in newly {
            if let Some(m) = self.proposals.get(&e.req) {
                by_msg.entry(m.counter).or_insert_with(|| (m.clone(), Vec::new())).1.push(e);
            }
        }
        for (_, (m, es)) in by_msg {
            self.reply(&m, &es);
        }
    }

    fn check_pending(&mut self) {
        let mut found = Vec::new();
        self.pending.retain(|(from, e)| match self.applied.get(&e.req) {
            None => true,
            Some(&o) if o == e.output => false,
            Some(&o) => {
                found.push(Accusation::SenderStateMismatch {
                    accused: *from,
                    req: e.req,
                    expected: o,
                    found: e.output,
                });
                false
            }
        });
        for a in found {
            if !self.suspects.contains(&a.accused()) {
                self.accuse(a);
            }
        }
    }

    pub fn commit_time_marker(&self) -> usize {
        self.committed.len()
    }
}

fn group_keys(cfg: &BftConfig) -> Vec<SessionKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run_seed ^ 0x6b65_7973);
    cfg.replicas
        .iter()
        .map(|_| {
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            SessionKey::new(k)
        })
        .collect()
}

/// A full BFT deployment on a [`SimNet`], with clients outside the TNIC
/// network receiving signed replies directly.
pub struct BftCluster {
    pub cfg: BftConfig,
    pub net: SimNet,
    pub replicas: Vec<Replica>,
    pub clients: Vec<QuorumClient>,
    crashed: BTreeSet<usize>,
    commit_times: BTreeMap<RequestId, u64>,
}

impl BftCluster {
    pub fn new(cfg: BftConfig, behaviors: Vec<Behavior>, n_clients: u32, net_cfg: NetConfig) -> Result<Self, BftError> {
        cfg.validate()?;
        let mut net = SimNet::new(cfg.replicas.iter().copied(), net_cfg);
        let handle = net.handle();
        let keys = group_keys(&cfg);
        let mut replicas = Vec::new();
        for (i, &dev) in cfg.replicas.iter().enumerate() {
            let mut dc = DeviceConfig::new(dev).with_delay(cfg.attest_delay);
            for (j, &owner) in cfg.replicas.iter().enumerate() {
                dc = dc.with_session(group_session(j), owner, keys[j].clone());
            }
            net.attach(Endpoint::connect(dc, &handle)?);
            let b = behaviors.get(i).cloned().unwrap_or_default();
            replicas.push(Replica::new(cfg.clone(), i, b));
        }
        let reply_keys: BTreeMap<_, _> = replicas.iter().map(|r| (r.device(), r.reply_key())).collect();
        let clients = (1..=n_clients)
            .map(|id| QuorumClient::new(id, cfg.quorum(), reply_keys.clone()))
            .collect();
        Ok(Self {
            cfg,
            net,
            replicas,
            clients,
            crashed: BTreeSet::new(),
            commit_times: BTreeMap::new(),
        })
    }

    pub fn crash(&mut self, idx: usize) {
        self.crashed.insert(idx);
        self.net.crash(self.cfg.replicas[idx]);
    }

    pub fn is_crashed(&self, idx: usize) -> bool {
        self.crashed.contains(&idx)
    }

    /// Issues `count` new requests from client `client` (1-based) as one batch.
    pub fn submit(&mut self, client: u32, count: usize) -> Result<Vec<RequestId>, BftError> {
        let reqs: Vec<RequestId> = (0..count)
            .map(|_| self.clients[client as usize - 1].next_request())
            .collect();
        self.submit_batch(&reqs)?;
        Ok(reqs)
    }

    pub fn submit_batch(&mut self, reqs: &[RequestId]) -> Result<(), BftError> {
        if self.is_crashed(0) {
            return Ok(());
        }
        let leader = self.cfg.leader();
        let ep = self.net.endpoint_mut(leader).expect("leader attached");
        self.replicas[0].propose(ep, reqs)?;
        if self.replicas[0].halted() {
            self.crash(0);
        }
        self.route();
        Ok(())
    }

    fn route(&mut self) {
        for i in 0..self.replicas.len() {
            for (client, reply) in self.replicas[i].take_outbox() {
                if let Some(c) = client.checked_sub(1).and_then(|c| self.clients.get_mut(c as usize)) {
                    let _ = c.on_reply(&reply, extract_output);
                }
            }
        }
    }

    /// Processes one network event. `false` once the network is idle.
    pub fn step(&mut self) -> Result<bool, BftError> {
        let Some(o) = self.net.step() else {
            return Ok(false);
        };
        if let Some(d) = o.device {
            if let Some(idx) = self.cfg.replicas.iter().position(|r| *r == d) {
                if !self.is_crashed(idx) {
                    let before = self.replicas[idx].committed.len();
                    let ep = self.net.endpoint_mut(d).unwrap();
                    self.replicas[idx].on_deliver(ep)?;
                    if idx == 0 && self.replicas[0].committed.len() > before {
                        let now = self.net.endpoint(d).unwrap().clock();
                        for req in self.replicas[0].committed.keys() {
                            self.commit_times.entry(*req).or_insert(now);
                        }
                    }
                    self.route();
                }
            }
        }
        Ok(true)
    }

    pub fn run(&mut self) -> Result<(), BftError> {
        while self.step()? {}
        Ok(())
    }

    pub fn leader_clock(&self) -> u64 {
        self.net.endpoint(self.cfg.leader()).unwrap().clock()
    }

    pub fn commit_time(&self, req: RequestId) -> Option<u64> {
        self.commit_times.get(&req).copied()
    }

    /// Indices of replicas that neither crashed nor deviate.
    pub fn correct(&self) -> Vec<usize> {
        (0..self.replicas.len())
            .filter(|i| !self.is_crashed(*i) && !self.replicas[*i].behavior().is_byzantine())
            .collect()
    }

    /// Checks agreement and validity across clients and correct replicas.
    pub fn check_safety(&self) -> Result<(), String> {
        let correct = self.correct();
        let mut by_value: BTreeMap<u64, RequestId> = BTreeMap::new();
        for c in &self.clients {
            for (req, v) in c.accepted() {
                let v = u64::from_be_bytes(v.as_slice().try_into().map_err(|_| "bad value".to_string())?);
                if let Some(other) = by_value.insert(v, *req) {
                    if other != *req {
                        return Err(format!("value {v} accepted for both {other:?} and {req:?}"));
                    }
                }
                for &i in &correct {
                    if let Some(e) = self.replicas[i].order().iter().find(|e| e.req == *req) {
                        if e.output != v {
                            return Err(format!("{req:?} accepted as {v}, correct replica {i} applied {}", e.output));
                        }
                    }
                }
            }
        }
        for (a, &i) in correct.iter().enumerate() {
            for &j in &correct[a + 1..] {
                let (x, y) = (self.replicas[i].order(), self.replicas[j].order());
                let n = x.len().min(y.len());
                if x[..n] != y[..n] {
                    return Err(format!("replicas {i} and {j} applied diverging orders"));
                }
            }
        }
        Ok(())
    }

    /// True if a correct replica accused `device`.
    pub fn flagged_by_correct(&self, device: DeviceId) -> bool {
        self.correct()
            .into_iter()
            .any(|i| self.replicas[i].accusations().iter().any(|a| a.accused() == device))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    NetworkFaults,
    Equivocation,
    CrashedFollower,
    LeaderCrash,
    ByzantineFollower,
    LeaderWrongOutput,
}

/// One seeded adversarial run: behaviours, crash, network schedule, workload.
#[derive(Debug, Clone)]
pub struct BftScenario {
    pub seed: u64,
    pub kind: ScenarioKind,
    pub behaviors: Vec<Behavior>,
    pub crash_at_start: Option<usize>,
    pub schedule: FaultSchedule,
    pub clients: u32,
    pub rounds: u64,
}

fn random_subset(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.gen_range(0..3) {
        0 => vec![1],
        1 => vec![2],
        _ => vec![1, 2],
    }
}

/// Network noise that never exhausts a retry budget.
fn noise(rng: &mut ChaCha8Rng, seed: u64) -> FaultSchedule {
    let mut s = FaultSchedule::new(seed);
    for _ in 0..rng.gen_range(1..=4) {
        let action = match rng.gen_range(0..6) {
            0 => FaultAction::Drop,
            1 => FaultAction::Duplicate,
            2 => FaultAction::Reorder,
            3 => FaultAction::Replay { index: 0 },
            4 => FaultAction::TamperBit { offset: None },
            _ => FaultAction::InjectForged { frame_hex: None },
        };
        let mut rule = FaultRule::new(action).times(rng.gen_range(1..=3));
        if rng.gen_bool(0.5) {
            rule = rule.from(DeviceId(rng.gen_range(1..=3)));
        }
        if rng.gen_bool(0.5) {
            rule = rule.at_index(rng.gen_range(0..4));
        }
        s.rules.push(rule);
    }
    s
}

impl BftScenario {
    /// Deterministic scenario for `seed`, cycling through every kind.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [
            ScenarioKind::NetworkFaults,
            ScenarioKind::Equivocation,
            ScenarioKind::CrashedFollower,
            ScenarioKind::LeaderCrash,
            ScenarioKind::ByzantineFollower,
            ScenarioKind::LeaderWrongOutput,
        ];
        let kind = kinds[(seed % kinds.len() as u64) as usize].clone();
        let rounds = rng.gen_range(2..=5);
        let mut behaviors = vec![Behavior::Honest; 3];
        let mut crash_at_start = None;
        match kind {
            ScenarioKind::NetworkFaults => {}
            ScenarioKind::Equivocation => {
                behaviors[0] = Behavior::LeaderEquivocate {
                    round: rng.gen_range(0..rounds),
                    first: random_subset(&mut rng),
                    second: random_subset(&mut rng),
                    variant: if rng.gen_bool(0.5) {
                        EquivocationVariant::Value
                    } else {
                        EquivocationVariant::Request
                    },
                }
            }
            ScenarioKind::CrashedFollower => crash_at_start = Some(rng.gen_range(1..=2)),
            ScenarioKind::LeaderCrash => {
                behaviors[0] = Behavior::CrashMidBroadcast {
                    round: rng.gen_range(0..rounds),
                    deliver_to: if rng.gen_bool(0.5) { vec![1] } else { vec![2] },
                }
            }
            ScenarioKind::ByzantineFollower => {
                behaviors[rng.gen_range(1..=2)] = if rng.gen_bool(0.5) {
                    Behavior::FollowerWrongOutput {
                        round: rng.gen_range(0..rounds),
                    }
                } else {
                    Behavior::StaleReplies
                }
            }
            ScenarioKind::LeaderWrongOutput => {
                behaviors[0] = Behavior::LeaderWrongOutput {
                    round: rng.gen_range(0..rounds),
                }
            }
        }
        let schedule = noise(&mut rng, seed);
        Self {
            seed,
            kind,
            behaviors,
            crash_at_start,
            schedule,
            clients: 2,
            rounds,
        }
    }

    pub fn is_equivocation(&self) -> bool {
        matches!(self.behaviors[0], Behavior::LeaderEquivocate { .. })
    }

    /// Builds the cluster and runs the workload: each round, one request
    /// per client, round-robin, network drained in between.
    pub fn run(&self) -> Result<BftCluster, BftError> {
        let cfg = BftConfig::new(1, self.seed);
        let mut cluster = BftCluster::new(cfg, self.behaviors.clone(), self.clients, NetConfig::default())?;
        cluster.net.set_schedule(self.schedule.clone());
        if let Some(i) = self.crash_at_start {
            cluster.crash(i);
        }
        for _ in 0..self.rounds {
            for c in 1..=self.clients {
                cluster.submit(c, 1)?;
            }
            cluster.run()?;
        }
        Ok(cluster)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(behaviors: Vec<Behavior>) -> BftCluster {
        BftCluster::new(BftConfig::new(1, 3), behaviors, 2, NetConfig::default()).unwrap()
    }

    #[test]
    fn message_codec_round_trip() {
        let e = vec![Entry {
            req: RequestId { client: 1, seq: 2 },
            output: 3,
        }];
        for m in [
            BftMessage::Proposal(e.clone()),
            BftMessage::Forward {
                entries: e,
                leader_frame: vec![9; 90],
            },
        ] {
            assert_eq!(BftMessage::decode(&m.encode()), Some(m));
        }
        assert_eq!(BftMessage::decode(b"Px"), None);
    }

    #[test]
    fn honest_ten_increments() {
        let mut c = cluster(vec![]);
        let mut reqs = Vec::new();
        for _ in 0..10 {
            reqs.extend(c.submit(1, 1).unwrap());
            c.run().unwrap();
        }
        for r in &c.replicas {
            assert_eq!(r.counter(), 10);
            assert!(r.accusations().is_empty());
        }
        for (i, req) in reqs.iter().enumerate() {
            assert_eq!(c.clients[0].result(*req).unwrap(), &(i as u64 + 1).to_be_bytes());
        }
        c.check_safety().unwrap();
        assert!(c.net.liveness_failures().is_empty());
    }

    #[test]
    fn misconfigured_cluster_refused() {
        let mut cfg = BftConfig::new(1, 0);
        cfg.replicas.pop();
        assert!(matches!(
            BftCluster::new(cfg, vec![], 1, NetConfig::default()),
            Err(BftError::BadConfig { n: 2, f: 1 })
        ));
    }

    #[test]
    fn leader_crash_mid_broadcast_still_applied_everywhere() {
        let mut c = cluster(vec![Behavior::CrashMidBroadcast {
            round: 0,
            deliver_to: vec![1],
        }]);
        let req = c.submit(1, 1).unwrap()[0];
        c.run().unwrap();
        assert_eq!(c.replicas[1].counter(), 1);
        assert_eq!(c.replicas[2].counter(), 1);
        assert_eq!(c.clients[0].result(req).unwrap(), &1u64.to_be_bytes());
    }

    #[test]
    fn every_equivocation_shape_is_flagged() {
        let subsets = [vec![1], vec![2], vec![1, 2]];
        for first in &subsets {
            for second in &subsets {
                for variant in [EquivocationVariant::Value, EquivocationVariant::Request] {
                    let mut c = cluster(vec![Behavior::LeaderEquivocate {
                        round: 1,
                        first: first.clone(),
                        second: second.clone(),
                        variant,
                    }]);
                    for _ in 0..3 {
                        c.submit(1, 1).unwrap();
                        c.submit(2, 1).unwrap();
                        c.run().unwrap();
                    }
                    assert!(
                        c.flagged_by_correct(DeviceId(1)),
                        "{first:?} {second:?} {variant:?} not flagged"
                    );
                    c.check_safety().unwrap();
                }
            }
        }
    }

    #[test]
    fn lying_follower_exposed_and_outvoted() {
        let mut c = cluster(vec![Behavior::Honest, Behavior::FollowerWrongOutput { round: 0 }]);
        let req = c.submit(1, 1).unwrap()[0];
        c.run().unwrap();
        assert!(c.flagged_by_correct(DeviceId(2)));
        assert_eq!(c.clients[0].result(req).unwrap(), &1u64.to_be_bytes());
        c.check_safety().unwrap();
    }

    #[test]
    fn stale_replies_do_not_count() {
        let mut c = cluster(vec![Behavior::Honest, Behavior::StaleReplies]);
        for _ in 0..3 {
            c.submit(1, 1).unwrap();
            c.run().unwrap();
        }
        assert!(c.clients[0].ignored_replies() >= 2);
        assert_eq!(c.clients[0].accepted().len(), 3);
    }

    #[test]
    fn wrong_leader_output_flagged_and_never_accepted() {
        let mut c = cluster(vec![Behavior::LeaderWrongOutput { round: 0 }]);
        let req = c.submit(1, 1).unwrap()[0];
        c.run().unwrap();
        assert!(c.flagged_by_correct(DeviceId(1)));
        assert!(c.clients[0].result(req).is_err());
    }

    #[test]
    fn scenarios_are_deterministic() {
        let a = BftScenario::generate(17).run().unwrap();
        let b = BftScenario::generate(17).run().unwrap();
        assert_eq!(a.net.trace_jsonl(), b.net.trace_jsonl());
    }
}
