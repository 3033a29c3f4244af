//! Bounded exhaustive checks of the kernel's ordering and authentication
//! guarantees.
//!
//! This is bounded model checking of the implementation, not a symbolic
//! proof: tiny instances (at most two senders with four messages each, one
//! adversarial mutation) are explored over every interleaving of sends and
//! deliveries by DFS with memoized states. The unbounded guarantees rest on
//! the original Tamarin models, which are not part of this crate.
//!
//! Action facts: `S` is recorded when a sender's kernel attests and hands
//! the frame to the network, `A` when the receiver's kernel accepts it.
//!
//! | lemma | statement checked on every `A(m)` by receiver `e1` |
//! |---|---|
//! | attestation (1) | a vendor that provisions config `c` saw a cert the device produced for `c` |
//! | transfer_auth (2) | `m` equals some earlier `S(m)` |
//! | no_lost (3) | every message its sender sent before `m` was accepted before |
//! | no_reorder (4) | messages of one sender are accepted in send order |
//! | no_duplicate (5) | `m` was not accepted before |
//!
//! Besides the production kernel, three deliberately broken kernels are
//! available as [`KernelVariant`]s; they exist only inside this module.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::device::{DeviceConfig, Endpoint, NetHandle};
use crate::kernel::{compute_tag, AttestedMessage, DeviceId, Kernel, SessionId, SessionKey};
use crate::remote_attestation::{
    measure, run_handshake_with, AttestError, AttestationCert, Controller, DeviceIdentity, MsgType, ProvisioningBundle,
    SessionSecret, Vendor,
};
use crate::wire::WireFrame;

pub const MAX_SENDERS: u8 = 2;
pub const MAX_MESSAGES: u8 = 4;
const RECEIVER: DeviceId = DeviceId(100);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckError {
    #[error("instance too large: {senders} senders x {messages} messages (max {MAX_SENDERS} x {MAX_MESSAGES})")]
    InstanceTooLarge { senders: u8, messages: u8 },
    #[error("mutation {0:?} does not fit the instance")]
    BadMutation(Mutation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    None,
    DropOne { sender: u8, index: u8 },
    DuplicateOne { sender: u8, index: u8 },
    /// Frame `index` goes out after frame `index + 1`.
    SwapAdjacent { sender: u8, index: u8 },
    TamperOneByte { sender: u8, index: u8, byte: u32 },
    /// Frame `index - 1` is sent again right after frame `index`.
    ReplayOne { sender: u8, index: u8 },
    /// A frame with frame `index`'s header and a fabricated body goes first.
    ForgeOne { sender: u8, index: u8 },
}

impl Mutation {
    fn target(&self) -> Option<(u8, u8)> {
        match *self {
            Self::None => None,
            Self::DropOne { sender, index }
            | Self::DuplicateOne { sender, index }
            | Self::SwapAdjacent { sender, index }
            | Self::TamperOneByte { sender, index, .. }
            | Self::ReplayOne { sender, index }
            | Self::ForgeOne { sender, index } => Some((sender, index)),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::DropOne { .. } => "drop-one",
            Self::DuplicateOne { .. } => "duplicate-one",
            Self::SwapAdjacent { .. } => "swap-adjacent",
            Self::TamperOneByte { .. } => "tamper-one-byte",
            Self::ReplayOne { .. } => "replay-one",
            Self::ForgeOne { .. } => "forge-one",
        }
    }
}

/// Wire length of every frame in an instance: two payload bytes.
pub const FRAME_LEN: u32 = crate::wire::FRAME_OVERHEAD as u32 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundedInstance {
    pub senders: u8,
    pub messages: u8,
    pub mutation: Mutation,
}

impl BoundedInstance {
    pub fn new(senders: u8, messages: u8, mutation: Mutation) -> Result<Self, CheckError> {
        let i = Self {
            senders,
            messages,
            mutation,
        };
        i.validate()?;
        Ok(i)
    }

    pub fn validate(&self) -> Result<(), CheckError> {
        if self.senders == 0 || self.messages == 0 || self.senders > MAX_SENDERS || self.messages > MAX_MESSAGES {
            return Err(CheckError::InstanceTooLarge {
                senders: self.senders,
                messages: self.messages,
            });
        }
        if let Some((s, i)) = self.mutation.target() {
            let fits = s < self.senders
                && i < self.messages
                && match self.mutation {
                    Mutation::SwapAdjacent { .. } => i + 1 < self.messages,
                    Mutation::ReplayOne { .. } => i >= 1,
                    Mutation::TamperOneByte { byte, .. } => byte < FRAME_LEN,
                    _ => true,
                };
            if !fits {
                return Err(CheckError::BadMutation(self.mutation));
            }
        }
        Ok(())
    }

    /// Every single mutation that fits `senders x messages`.
    pub fn all_mutations(senders: u8, messages: u8) -> Vec<Mutation> {
        let mut out = vec![Mutation::None];
        for sender in 0..senders {
            for index in 0..messages {
                out.push(Mutation::DropOne { sender, index });
                out.push(Mutation::DuplicateOne { sender, index });
                if index + 1 < messages {
                    out.push(Mutation::SwapAdjacent { sender, index });
                }
                if index >= 1 {
                    out.push(Mutation::ReplayOne { sender, index });
                }
                out.push(Mutation::ForgeOne { sender, index });
                for byte in 0..FRAME_LEN {
                    out.push(Mutation::TamperOneByte { sender, index, byte });
                }
            }
        }
        out
    }

    /// The full grid: every size up to the bounds, every mutation.
    pub fn grid() -> Vec<Self> {
        let mut out = Vec::new();
        for senders in 1..=MAX_SENDERS {
            for messages in 1..=MAX_MESSAGES {
                for mutation in Self::all_mutations(senders, messages) {
                    out.push(Self {
                        senders,
                        messages,
                        mutation,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    Attestation = 1,
    TransferAuth = 2,
    NoLost = 3,
    NoReorder = 4,
    NoDuplicate = 5,
}

impl Lemma {
    pub const ALL: [Lemma; 5] = [
        Self::Attestation,
        Self::TransferAuth,
        Self::NoLost,
        Self::NoReorder,
        Self::NoDuplicate,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Attestation => "attestation",
            Self::TransferAuth => "transfer_auth",
            Self::NoLost => "no_lost",
            Self::NoReorder => "no_reorder",
            Self::NoDuplicate => "no_duplicate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    Correct,
    /// Neither attest nor verify moves a counter.
    SkipCounterIncrement,
    /// Verify takes any counter at or above the expected one.
    AcceptAnyCounterAtLeast,
    /// Attest keeps one send counter per destination, so a multicast
    /// can carry different payloads under one counter.
    PerReceiverMulticastCounters,
}

impl KernelVariant {
    pub const ALL: [KernelVariant; 4] = [
        Self::Correct,
        Self::SkipCounterIncrement,
        Self::AcceptAnyCounterAtLeast,
        Self::PerReceiverMulticastCounters,
    ];
}

/// A kernel under test. `Correct` delegates to the production [`Kernel`];
/// the others reuse its tag check and keep their own counters.
#[derive(Debug, Clone)]
struct ModelKernel {
    variant: KernelVariant,
    real: Kernel,
    keys: BTreeMap<SessionId, SessionKey>,
    send: BTreeMap<(SessionId, DeviceId), u64>,
    recv: BTreeMap<SessionId, u64>,
}

impl ModelKernel {
    fn new(variant: KernelVariant, device: DeviceId, sessions: &[(SessionId, SessionKey)]) -> Self {
        let mut real = Kernel::new(device);
        for (s, k) in sessions {
            real.provision_session(*s, k.clone()).expect("distinct sessions");
        }
        Self {
            variant,
            real,
            keys: sessions.iter().cloned().collect(),
            send: BTreeMap::new(),
            recv: BTreeMap::new(),
        }
    }

    fn attest(&mut self, session: SessionId, payload: &[u8], to: DeviceId) -> AttestedMessage {
        let device = self.real.device();
        let manual = |counter: u64, keys: &BTreeMap<SessionId, SessionKey>| AttestedMessage {
            tag: compute_tag(&keys[&session], payload, device, counter),
            payload: payload.to_vec(),
            device,
            session,
            counter,
        };
        match self.variant {
            KernelVariant::Correct | KernelVariant::AcceptAnyCounterAtLeast => {
                self.real.attest(session, payload).expect("provisioned session")
            }
            KernelVariant::SkipCounterIncrement => manual(0, &self.keys),
            KernelVariant::PerReceiverMulticastCounters => {
                let c = self.send.entry((session, to)).or_insert(0);
                let counter = *c;
                *c += 1;
                manual(counter, &self.keys)
            }
        }
    }

    fn verify(&mut self, msg: &AttestedMessage) -> bool {
        match self.variant {
            KernelVariant::Correct | KernelVariant::PerReceiverMulticastCounters => self.real.verify(msg).is_ok(),
            KernelVariant::SkipCounterIncrement => {
                self.real.verify_tag(msg.session, msg).is_ok() && msg.counter == *self.recv.get(&msg.session).unwrap_or(&0)
            }
            KernelVariant::AcceptAnyCounterAtLeast => {
                let expected = self.recv.entry(msg.session).or_insert(0);
                if self.real.verify_tag(msg.session, msg).is_ok() && msg.counter >= *expected {
                    *expected = msg.counter + 1;
                    true
                } else {
                    false
                }
            }
        }
    }

    fn counters(&self, out: &mut Vec<u64>) {
        for s in self.real.sessions() {
            let st = self.real.session(s).unwrap();
            out.extend([st.send_count(), st.recv_count()]);
        }
        out.extend(self.send.values().copied());
        out.extend(self.recv.values().copied());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    /// The sender attests its next message and hands it to the network.
    Send { sender: u8 },
    /// The head of a channel reaches the receiver.
    Deliver { channel: u8 },
    /// Consistency instances: the sender attests once and sends to all.
    Multicast,
    /// Consistency instances: the sender attests one payload per receiver.
    Equivocate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub instance: BoundedInstance,
    pub kernel: KernelVariant,
    pub lemma: Lemma,
    pub steps: Vec<Step>,
    /// Human-readable account of the violating acceptance.
    pub violation: String,
}

impl Counterexample {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Holds,
    Counterexample(Box<Counterexample>),
}

impl Verdict {
    pub fn holds(&self) -> bool {
        matches!(self, Self::Holds)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LemmaReport {
    pub lemma: Lemma,
    pub verdict: Verdict,
    pub states: usize,
}

impl fmt::Display for LemmaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match &self.verdict {
            Verdict::Holds => "Holds".to_string(),
            Verdict::Counterexample(c) => format!("Counterexample ({} steps): {}", c.steps.len(), c.violation),
        };
        write!(f, "lemma {} {}: {} [{} states]", self.lemma.id(), self.lemma.name(), v, self.states)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Item {
    label: (u8, u8, u8),
    bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
struct World {
    senders: Vec<ModelKernel>,
    receiver: ModelKernel,
    sent: Vec<Vec<AttestedMessage>>,
    queues: Vec<VecDeque<Item>>,
    held: Vec<Option<Item>>,
    accepted: Vec<u8>,
}

fn session_of(sender: u8) -> SessionId {
    SessionId(sender as u32 + 1)
}

fn sender_device(sender: u8) -> DeviceId {
    DeviceId(sender as u32 + 1)
}

fn instance_key(sender: u8) -> SessionKey {
    SessionKey::new([0x40 + sender; 32])
}

const LABEL_ORIG: u8 = 0;
const LABEL_DUP: u8 = 1;
const LABEL_TAMPERED: u8 = 2;
const LABEL_REPLAY: u8 = 3;
const LABEL_FORGED: u8 = 4;

fn forge_like(msg: &AttestedMessage) -> Vec<u8> {
    let mut f = WireFrame::from(msg.clone());
    for b in &mut f.payload {
        *b ^= 0xff;
    }
    let mut tag = *f.tag.as_bytes();
    for b in &mut tag[..crate::kernel::MAC_LEN] {
        *b = b.wrapping_mul(31).wrapping_add(7);
    }
    f.tag = crate::kernel::AttestationTag::from_bytes(tag);
    f.encode()
}

impl World {
    fn new(inst: &BoundedInstance, variant: KernelVariant) -> Self {
        let sessions: Vec<(SessionId, SessionKey)> = (0..inst.senders).map(|s| (session_of(s), instance_key(s))).collect();
        Self {
            senders: (0..inst.senders)
                .map(|s| ModelKernel::new(variant, sender_device(s), &sessions[s as usize..=s as usize]))
                .collect(),
            receiver: ModelKernel::new(variant, RECEIVER, &sessions),
            sent: vec![Vec::new(); inst.senders as usize],
            queues: vec![VecDeque::new(); inst.senders as usize],
            held: vec![None; inst.senders as usize],
            accepted: vec![0; inst.senders as usize],
        }
    }

    fn key(&self) -> (Vec<u64>, Vec<Vec<(u8, u8, u8)>>, Vec<Option<(u8, u8, u8)>>, Vec<u8>) {
        let mut counters: Vec<u64> = self.sent.iter().map(|s| s.len() as u64).collect();
        for k in &self.senders {
            k.counters(&mut counters);
        }
        self.receiver.counters(&mut counters);
        (
            counters,
            self.queues.iter().map(|q| q.iter().map(|i| i.label).collect()).collect(),
            self.held.iter().map(|h| h.as_ref().map(|i| i.label)).collect(),
            self.accepted.clone(),
        )
    }

    fn send(&mut self, s: u8, mutation: Mutation) {
        let idx = self.sent[s as usize].len() as u8;
        let msg = self.senders[s as usize].attest(session_of(s), &[s, idx], RECEIVER);
        self.sent[s as usize].push(msg.clone());
        let orig = Item {
            label: (s, idx, LABEL_ORIG),
            bytes: WireFrame::from(msg.clone()).encode(),
        };
        let q = &mut self.queues[s as usize];
        let hit = mutation.target() == Some((s, idx));
        match mutation {
            _ if !hit => {
                q.push_back(orig);
                if let Some(h) = self.held[s as usize].take() {
                    q.push_back(h);
                }
            }
            Mutation::None => unreachable!(),
            Mutation::DropOne { .. } => {}
            Mutation::DuplicateOne { .. } => {
                let mut dup = orig.clone();
                dup.label.2 = LABEL_DUP;
                q.push_back(orig);
                q.push_back(dup);
            }
            Mutation::SwapAdjacent { .. } => self.held[s as usize] = Some(orig),
            Mutation::TamperOneByte { byte, .. } => {
                let mut t = orig;
                t.bytes[byte as usize] ^= 0x01;
                t.label.2 = LABEL_TAMPERED;
                q.push_back(t);
            }
            Mutation::ReplayOne { .. } => {
                let earlier = &self.sent[s as usize][idx as usize - 1];
                q.push_back(orig);
                q.push_back(Item {
                    label: (s, idx - 1, LABEL_REPLAY),
                    bytes: WireFrame::from(earlier.clone()).encode(),
                });
            }
            Mutation::ForgeOne { .. } => {
                q.push_back(Item {
                    label: (s, idx, LABEL_FORGED),
                    bytes: forge_like(&msg),
                });
                q.push_back(orig);
            }
        }
    }

    /// Delivers the head of channel `c`; returns lemma violations.
    fn deliver(&mut self, c: u8) -> Vec<(Lemma, String)> {
        let item = self.queues[c as usize].pop_front().expect("non-empty channel");
        let Ok(frame) = WireFrame::decode(&item.bytes) else {
            return Vec::new();
        };
        let msg = AttestedMessage::from(frame);
        if self.receiver.real.session(msg.session).is_none() || !self.receiver.verify(&msg) {
            return Vec::new();
        }
        let mut v = Vec::new();
        let origin = self.sent.iter().enumerate().find_map(|(s, list)| {
            list.iter().position(|m| *m == msg).map(|j| (s, j))
        });
        let Some((s, j)) = origin else {
            v.push((Lemma::TransferAuth, format!("accepted {:?} that no sender produced", msg.identity())));
            return v;
        };
        let mask = self.accepted[s];
        if mask & (1 << j) != 0 {
            v.push((Lemma::NoDuplicate, format!("message {j} of sender {s} accepted twice")));
        }
        if let Some(k) = (0..j).find(|k| mask & (1 << k) == 0) {
            v.push((
                Lemma::NoLost,
                format!("message {j} of sender {s} accepted while earlier message {k} was not"),
            ));
        }
        if let Some(k) = (j + 1..8).find(|k| mask & (1 << k) != 0) {
            v.push((
                Lemma::NoReorder,
                format!("message {j} of sender {s} accepted after later message {k}"),
            ));
        }
        self.accepted[s] |= 1 << j;
        v
    }
}

/// Explores `inst` under `variant`; one report per lemma 2..=5.
pub fn check_instance(inst: &BoundedInstance, variant: KernelVariant) -> Result<Vec<LemmaReport>, CheckError> {
    inst.validate()?;
    let mut found: BTreeMap<Lemma, Counterexample> = BTreeMap::new();
    let mut visited = HashSet::new();
    let mut path = Vec::new();
    dfs(inst, variant, World::new(inst, variant), &mut visited, &mut path, &mut found);
    Ok([Lemma::TransferAuth, Lemma::NoLost, Lemma::NoReorder, Lemma::NoDuplicate]
        .into_iter()
        .map(|lemma| LemmaReport {
            lemma,
            verdict: found
                .remove(&lemma)
                .map_or(Verdict::Holds, |c| Verdict::Counterexample(Box::new(c))),
            states: visited.len(),
        })
        .collect())
}

fn dfs(
    inst: &BoundedInstance,
    variant: KernelVariant,
    world: World,
    visited: &mut HashSet<(Vec<u64>, Vec<Vec<(u8, u8, u8)>>, Vec<Option<(u8, u8, u8)>>, Vec<u8>)>,
    path: &mut Vec<Step>,
    found: &mut BTreeMap<Lemma, Counterexample>,
) {
    if !visited.insert(world.key()) {
        return;
    }
    for s in 0..inst.senders {
        for step in [Step::Send { sender: s }, Step::Deliver { channel: s }] {
            let mut next = world.clone();
            let violations = match step {
                Step::Send { sender } if (next.sent[sender as usize].len() as u8) < inst.messages => {
                    next.send(sender, inst.mutation);
                    Vec::new()
                }
                Step::Deliver { channel } if !next.queues[channel as usize].is_empty() => next.deliver(channel),
                _ => continue,
            };
            path.push(step);
            for (lemma, why) in violations {
                found.entry(lemma).or_insert_with(|| Counterexample {
                    instance: *inst,
                    kernel: variant,
                    lemma,
                    steps: path.clone(),
                    violation: why,
                });
            }
            dfs(inst, variant, next, visited, path, found);
            path.pop();
        }
    }
}

/// Re-executes a counterexample's steps and reports whether the same lemma
/// is violated at its last step.
pub fn replay(cx: &Counterexample) -> Result<Verdict, CheckError> {
    cx.instance.validate()?;
    if cx.lemma == Lemma::Attestation {
        return Ok(check_attestation_one(HandshakeMutation::from_instance(cx.instance.mutation)));
    }
    let mut w = World::new(&cx.instance, cx.kernel);
    let mut last = Vec::new();
    for step in &cx.steps {
        last = match *step {
            Step::Send { sender } => {
                w.send(sender, cx.instance.mutation);
                Vec::new()
            }
            Step::Deliver { channel } => w.deliver(channel),
            _ => return Err(CheckError::BadMutation(cx.instance.mutation)),
        };
    }
    Ok(match last.into_iter().find(|(l, _)| *l == cx.lemma) {
        Some((lemma, violation)) => Verdict::Counterexample(Box::new(Counterexample {
            violation,
            lemma,
            ..cx.clone()
        })),
        None => Verdict::Holds,
    })
}

/// Checks one lemma on one instance.
pub fn check_lemma(inst: &BoundedInstance, lemma: Lemma, variant: KernelVariant) -> Result<LemmaReport, CheckError> {
    if lemma == Lemma::Attestation {
        inst.validate()?;
        let verdict = match check_attestation_one(HandshakeMutation::from_instance(inst.mutation)) {
            Verdict::Counterexample(mut c) => {
                c.instance = *inst;
                c.kernel = variant;
                Verdict::Counterexample(c)
            }
            v => v,
        };
        return Ok(LemmaReport {
            lemma,
            verdict,
            states: 1,
        });
    }
    Ok(check_instance(inst, variant)?
        .into_iter()
        .find(|r| r.lemma == lemma)
        .expect("every non-attestation lemma is reported"))
}

/// One handshake-level mutation, for the attestation lemma.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeMutation {
    None,
    Drop(MsgType),
    Tamper(MsgType, usize),
    Replay(MsgType),
    Forge(MsgType),
}

impl HandshakeMutation {
    /// Maps an instance mutation onto the handshake: message `index % 4`.
    pub fn from_instance(m: Mutation) -> Self {
        let ty = |i: u8| MsgType::ALL[i as usize % 4];
        match m {
            Mutation::None | Mutation::DuplicateOne { .. } | Mutation::SwapAdjacent { .. } => Self::None,
            Mutation::DropOne { index, .. } => Self::Drop(ty(index)),
            Mutation::TamperOneByte { index, byte, .. } => Self::Tamper(ty(index), byte as usize),
            Mutation::ReplayOne { index, .. } => Self::Replay(ty(index)),
            Mutation::ForgeOne { index, .. } => Self::Forge(ty(index)),
        }
    }
}

const CTRL_BIN: &[u8] = b"tnic controller firmware";

struct Handshake {
    ctrl: Controller,
    vendor: Vendor,
    ep: Endpoint,
    bundle: ProvisioningBundle,
    _rx: std::sync::mpsc::Receiver<crate::device::Outgoing>,
}

fn handshake_fixture(vendor_seed: u64) -> Handshake {
    let id = DeviceIdentity::manufacture([0x11; 32], [0x22; 32], CTRL_BIN);
    let vendor = Vendor::new(vendor_seed, [0x33; 32], id.hw_public(), measure(CTRL_BIN));
    let ctrl = Controller::new(id, vendor.public_key());
    let (tx, rx) = std::sync::mpsc::channel();
    let ep = Endpoint::connect(DeviceConfig::new(DeviceId(1)), &NetHandle::new(tx, [DeviceId(2)])).expect("empty config");
    let bundle = ProvisioningBundle {
        bitstream: b"attestation kernel bitstream".to_vec(),
        secrets: vec![SessionSecret {
            session: SessionId(1),
            peer: DeviceId(2),
            key: SessionKey::new([0x44; 32]),
        }],
        config: "checker".into(),
    };
    Handshake {
        ctrl,
        vendor,
        ep,
        bundle,
        _rx: rx,
    }
}

const CHECKED_RUN: u64 = 5;

/// Messages of an earlier honest run, under a different nonce.
fn earlier_run() -> BTreeMap<MsgType, Vec<u8>> {
    let mut h = handshake_fixture(CHECKED_RUN - 1);
    let (t, _) = run_handshake_with(&mut h.ctrl, &mut h.vendor, &h.bundle, &mut h.ep, |_, _| {});
    t.messages.into_iter().collect()
}

/// Runs one handshake under `m` and evaluates the attestation lemma:
/// whenever the vendor provisions (`D_ipv(c)`: it seals a bundle after
/// accepting a cert for config `c = (nonce, digest)`), the device earlier
/// emitted a cert for exactly that `c` (`D_tnic(c)`), and on completion the
/// device's installed measurement is the bundle's.
pub fn check_attestation_one(m: HandshakeMutation) -> Verdict {
    let mut h = handshake_fixture(CHECKED_RUN);
    let earlier = earlier_run();
    let mut seed = 0x9e37_79b9u32;
    let mut produced: Vec<AttestationCert> = Vec::new();
    let mut accepted: Option<AttestationCert> = None;
    let mut vendor_provisioned = false;
    let (_, result) = run_handshake_with(&mut h.ctrl, &mut h.vendor, &h.bundle, &mut h.ep, |ty, bytes| {
        if ty == MsgType::Cert {
            if let Ok(c) = AttestationCert::decode(bytes) {
                produced.push(c);
            }
        }
        if ty == MsgType::Sealed {
            vendor_provisioned = true;
        }
        match m {
            HandshakeMutation::Drop(t) if t == ty => bytes.clear(),
            HandshakeMutation::Tamper(t, i) if t == ty && !bytes.is_empty() => {
                let i = i % bytes.len();
                bytes[i] ^= 0x01;
            }
            HandshakeMutation::Replay(t) if t == ty => *bytes = earlier[&ty].clone(),
            HandshakeMutation::Forge(t) if t == ty => {
                for b in bytes.iter_mut() {
                    seed = seed.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                    *b = (seed >> 24) as u8;
                }
            }
            _ => {}
        }
        if ty == MsgType::Cert {
            accepted = AttestationCert::decode(bytes).ok();
        }
    });
    let fail = |why: String| {
        Verdict::Counterexample(Box::new(Counterexample {
            instance: BoundedInstance {
                senders: 1,
                messages: 1,
                mutation: Mutation::None,
            },
            kernel: KernelVariant::Correct,
            lemma: Lemma::Attestation,
            steps: Vec::new(),
            violation: format!("{m:?}: {why}"),
        }))
    };
    if vendor_provisioned {
        let Some(c) = accepted else {
            return fail("vendor provisioned without a decodable cert".into());
        };
        let backed = produced
            .iter()
            .any(|p| p.nonce == c.nonce && p.ctrl_bin_digest == c.ctrl_bin_digest && p.dh_pub == c.dh_pub);
        if !backed || c.ctrl_bin_digest != measure(CTRL_BIN) {
            return fail("vendor provisioned a config the device never attested".into());
        }
    }
    match result {
        Ok(measurement) => {
            if !vendor_provisioned {
                return fail("device installed a bundle the vendor never sealed".into());
            }
            if h.ep.bitstream_measurement() != Some(&measurement) || measurement != measure(&h.bundle.bitstream) {
                return fail("installed measurement differs from the sealed bundle".into());
            }
        }
        Err(AttestError::Device(_)) => return fail("provisioning hit a device error".into()),
        Err(_) => {}
    }
    Verdict::Holds
}

/// Every handshake mutation: drop, replay and forge of each message, and a
/// one-byte flip at every offset of every message.
pub fn check_attestation_exhaustive() -> LemmaReport {
    let mut h = handshake_fixture(CHECKED_RUN);
    let (t, _) = run_handshake_with(&mut h.ctrl, &mut h.vendor, &h.bundle, &mut h.ep, |_, _| {});
    let mut muts = vec![HandshakeMutation::None];
    for (ty, bytes) in &t.messages {
        muts.extend([
            HandshakeMutation::Drop(*ty),
            HandshakeMutation::Replay(*ty),
            HandshakeMutation::Forge(*ty),
        ]);
        muts.extend((0..bytes.len()).map(|i| HandshakeMutation::Tamper(*ty, i)));
    }
    let states = muts.len();
    let verdict = muts
        .into_iter()
        .map(check_attestation_one)
        .find(|v| !v.holds())
        .unwrap_or(Verdict::Holds);
    LemmaReport {
        lemma: Lemma::Attestation,
        verdict,
        states,
    }
}

/// Outcome of a multicast prefix-consistency check. Counterexamples carry
/// [`Lemma::NoReorder`], its single-receiver counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyReport {
    pub verdict: Verdict,
    pub states: usize,
}

impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.verdict {
            Verdict::Holds => write!(f, "consistency: Holds [{} states]", self.states),
            Verdict::Counterexample(c) => write!(
                f,
                "consistency: Counterexample ({} steps): {} [{} states]",
                c.steps.len(),
                c.violation,
                self.states
            ),
        }
    }
}

/// One sender multicasting `rounds` messages to `receivers` receivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyInstance {
    pub receivers: u8,
    pub rounds: u8,
}

#[derive(Debug, Clone)]
struct MulticastWorld {
    sender: ModelKernel,
    receivers: Vec<ModelKernel>,
    rounds_done: u8,
    queues: Vec<VecDeque<(u8, u8)>>,
    frames: BTreeMap<(u8, u8), AttestedMessage>,
    logs: Vec<Vec<Vec<u8>>>,
}

const MC_SESSION: SessionId = SessionId(9);

impl MulticastWorld {
    fn new(inst: &ConsistencyInstance, variant: KernelVariant) -> Self {
        let s = [(MC_SESSION, SessionKey::new([0x77; 32]))];
        Self {
            sender: ModelKernel::new(variant, DeviceId(1), &s),
            receivers: (0..inst.receivers)
                .map(|r| ModelKernel::new(variant, DeviceId(101 + r as u32), &s))
                .collect(),
            rounds_done: 0,
            queues: vec![VecDeque::new(); inst.receivers as usize],
            frames: BTreeMap::new(),
            logs: vec![Vec::new(); inst.receivers as usize],
        }
    }

    fn key(&self) -> (Vec<u64>, Vec<Vec<(u8, u8)>>, Vec<Vec<Vec<u8>>>) {
        let mut c = vec![self.rounds_done as u64];
        self.sender.counters(&mut c);
        for r in &self.receivers {
            r.counters(&mut c);
        }
        (c, self.queues.iter().map(|q| q.iter().copied().collect()).collect(), self.logs.clone())
    }

    fn send(&mut self, equivocate: bool) {
        let round = self.rounds_done;
        self.rounds_done += 1;
        let n = self.receivers.len() as u8;
        if equivocate {
            for r in 0..n {
                let m = self.sender.attest(MC_SESSION, &[round, r + 1], DeviceId(101 + r as u32));
                self.frames.insert((round, r + 1), m);
                self.queues[r as usize].push_back((round, r + 1));
            }
        } else {
            let m = self.sender.attest(MC_SESSION, &[round, 0], DeviceId(101));
            self.frames.insert((round, 0), m);
            for q in &mut self.queues {
                q.push_back((round, 0));
            }
        }
    }

    fn deliver(&mut self, r: u8) -> Option<String> {
        let id = self.queues[r as usize].pop_front()?;
        let msg = &self.frames[&id];
        if self.receivers[r as usize].verify(msg) {
            self.logs[r as usize].push(msg.payload.clone());
        }
        for (a, la) in self.logs.iter().enumerate() {
            for (b, lb) in self.logs.iter().enumerate().skip(a + 1) {
                let n = la.len().min(lb.len());
                if la[..n] != lb[..n] {
                    return Some(format!("receivers {a} and {b} accepted diverging sequences {la:?} / {lb:?}"));
                }
            }
        }
        None
    }
}

/// Prefix consistency of multicast acceptance, over every interleaving and
/// every per-round choice between honest multicast and equivocation.
pub fn check_consistency(inst: &ConsistencyInstance, variant: KernelVariant) -> Result<ConsistencyReport, CheckError> {
    if inst.receivers == 0 || inst.receivers > MAX_SENDERS || inst.rounds == 0 || inst.rounds > MAX_MESSAGES {
        return Err(CheckError::InstanceTooLarge {
            senders: inst.receivers,
            messages: inst.rounds,
        });
    }
    let mut visited = HashSet::new();
    let mut path = Vec::new();
    let found = mc_dfs(inst, MulticastWorld::new(inst, variant), &mut visited, &mut path);
    Ok(ConsistencyReport {
        verdict: match found {
            None => Verdict::Holds,
            Some((steps, violation)) => Verdict::Counterexample(Box::new(Counterexample {
                instance: BoundedInstance {
                    senders: 1,
                    messages: inst.rounds,
                    mutation: Mutation::None,
                },
                kernel: variant,
                lemma: Lemma::NoReorder,
                steps,
                violation,
            })),
        },
        states: visited.len(),
    })
}

type McKey = (Vec<u64>, Vec<Vec<(u8, u8)>>, Vec<Vec<Vec<u8>>>);

fn mc_dfs(
    inst: &ConsistencyInstance,
    w: MulticastWorld,
    visited: &mut HashSet<McKey>,
    path: &mut Vec<Step>,
) -> Option<(Vec<Step>, String)> {
    if !visited.insert(w.key()) {
        return None;
    }
    let mut steps = Vec::new();
    if w.rounds_done < inst.rounds {
        steps.extend([Step::Multicast, Step::Equivocate]);
    }
    steps.extend((0..inst.receivers).filter(|r| !w.queues[*r as usize].is_empty()).map(|channel| Step::Deliver { channel }));
    for step in steps {
        let mut next = w.clone();
        path.push(step);
        let bad = match step {
            Step::Multicast => {
                next.send(false);
                None
            }
            Step::Equivocate => {
                next.send(true);
                None
            }
            Step::Deliver { channel } => next.deliver(channel),
            Step::Send { .. } => None,
        };
        if let Some(why) = bad {
            return Some((path.clone(), why));
        }
        if let Some(found) = mc_dfs(inst, next, visited, path) {
            return Some(found);
        }
        path.pop();
    }
    None
}

/// Summary of a whole grid run for one kernel.
#[derive(Debug, Clone)]
pub struct GridSummary {
    pub kernel: KernelVariant,
    pub instances: usize,
    pub states: usize,
    /// First counterexample per lemma, if any.
    pub reports: Vec<LemmaReport>,
    /// Multicast prefix consistency over every receiver and round count.
    pub consistency: ConsistencyReport,
}

impl GridSummary {
    /// True when every lemma and the consistency check hold.
    pub fn all_hold(&self) -> bool {
        self.reports.iter().all(|r| r.verdict.holds()) && self.consistency.verdict.holds()
    }
}

/// Runs every lemma over the full instance grid (and the multicast
/// consistency check) for one kernel.
pub fn check_grid(variant: KernelVariant) -> GridSummary {
    let grid = BoundedInstance::grid();
    let mut first: BTreeMap<Lemma, LemmaReport> = BTreeMap::new();
    let mut states = 0;
    for inst in &grid {
        for r in check_instance(inst, variant).expect("grid instances are valid") {
            states += r.states / 4;
            let slot = first.entry(r.lemma).or_insert_with(|| LemmaReport {
                lemma: r.lemma,
                verdict: Verdict::Holds,
                states: 0,
            });
            slot.states += r.states;
            if slot.verdict.holds() && !r.verdict.holds() {
                slot.verdict = r.verdict;
            }
        }
    }
    let mut reports = vec![check_attestation_exhaustive()];
    reports.extend(first.into_values());
    let mut consistency = ConsistencyReport {
        verdict: Verdict::Holds,
        states: 0,
    };
    for receivers in 1..=MAX_SENDERS {
        for rounds in 1..=MAX_MESSAGES {
            let r = check_consistency(&ConsistencyInstance { receivers, rounds }, variant).expect("within bounds");
            consistency.states += r.states;
            if consistency.verdict.holds() {
                consistency.verdict = r.verdict;
            }
        }
    }
    GridSummary {
        kernel: variant,
        instances: grid.len(),
        states,
        reports,
        consistency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(senders: u8, messages: u8, mutation: Mutation) -> BoundedInstance {
        BoundedInstance::new(senders, messages, mutation).unwrap()
    }

    #[test]
    fn bounds_enforced() {
        assert!(matches!(
            BoundedInstance::new(3, 1, Mutation::None),
            Err(CheckError::InstanceTooLarge { .. })
        ));
        assert!(matches!(
            BoundedInstance::new(1, 2, Mutation::SwapAdjacent { sender: 0, index: 1 }),
            Err(CheckError::BadMutation(_))
        ));
    }

    #[test]
    fn correct_kernel_small_grid_holds() {
        for m in BoundedInstance::all_mutations(2, 2) {
            for r in check_instance(&inst(2, 2, m), KernelVariant::Correct).unwrap() {
                assert!(r.verdict.holds(), "{m:?}: {r}");
            }
        }
    }

    #[test]
    fn skip_increment_duplicates() {
        let i = inst(1, 2, Mutation::DuplicateOne { sender: 0, index: 0 });
        let r = check_lemma(&i, Lemma::NoDuplicate, KernelVariant::SkipCounterIncrement).unwrap();
        let Verdict::Counterexample(c) = r.verdict else { panic!("expected counterexample") };
        assert_eq!(replay(&c).unwrap(), Verdict::Counterexample(c.clone()));
        let back = Counterexample::from_json(&c.to_json()).unwrap();
        assert_eq!(back, *c);
    }

    #[test]
    fn accept_any_loses_under_drop() {
        let i = inst(1, 2, Mutation::DropOne { sender: 0, index: 0 });
        let r = check_lemma(&i, Lemma::NoLost, KernelVariant::AcceptAnyCounterAtLeast).unwrap();
        assert!(!r.verdict.holds());
        let ok = check_lemma(&i, Lemma::NoLost, KernelVariant::Correct).unwrap();
        assert!(ok.verdict.holds());
    }

    #[test]
    fn multicast_consistency() {
        let two = ConsistencyInstance { receivers: 2, rounds: 2 };
        assert!(check_consistency(&two, KernelVariant::Correct).unwrap().verdict.holds());
        assert!(!check_consistency(&two, KernelVariant::PerReceiverMulticastCounters)
            .unwrap()
            .verdict
            .holds());
        let one = ConsistencyInstance { receivers: 1, rounds: 3 };
        assert!(check_consistency(&one, KernelVariant::PerReceiverMulticastCounters)
            .unwrap()
            .verdict
            .holds());
    }

    #[test]
    fn attestation_lemma_spot_checks() {
        for m in [
            HandshakeMutation::None,
            HandshakeMutation::Drop(MsgType::Cert),
            HandshakeMutation::Tamper(MsgType::Cert, 40),
            HandshakeMutation::Replay(MsgType::Cert),
            HandshakeMutation::Forge(MsgType::Sealed),
        ] {
            assert!(check_attestation_one(m).holds(), "{m:?}");
        }
    }
}
