//! Accountability by auditing tamper-evident logs.
//!
//! A root hands work items to two children; each child keeps a running sum
//! and answers with it. Every send and every accepted receive is logged,
//! and the log entries embed the attested messages themselves, so they
//! double as authenticators. A witness that knows each node's state machine
//! replays the logs, checks every embedded message, and cross-checks the
//! logs against each other.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceConfig, DeviceError, Endpoint};
use crate::kernel::{AttestationTag, AttestedMessage, DeviceId, Kernel, SessionId, SessionKey, TAG_LEN};
use crate::log::{verify_entries, LogEntry, TamperEvidentLog, DIGEST_LEN, ZERO_DIGEST};
use crate::net::{FaultAction, FaultRule, FaultSchedule, NetConfig, SimNet};

pub const ROOT: DeviceId = DeviceId(1);
pub const CHILDREN: [DeviceId; 2] = [DeviceId(2), DeviceId(3)];

const LOG_BASE: u32 = 0x6000;
const DOWN_BASE: u32 = 0x6100;
const UP_BASE: u32 = 0x6200;

pub fn log_session(d: DeviceId) -> SessionId {
    SessionId(LOG_BASE + d.0)
}

pub fn down_session(child: DeviceId) -> SessionId {
    SessionId(DOWN_BASE + child.0)
}

pub fn up_session(child: DeviceId) -> SessionId {
    SessionId(UP_BASE + child.0)
}

/// One log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Send(AttestedMessage),
    Recv(AttestedMessage),
}

impl Record {
    pub fn encode(&self) -> Vec<u8> {
        let (t, m) = match self {
            Self::Send(m) => (b'S', m),
            Self::Recv(m) => (b'R', m),
        };
        let mut out = vec![t];
        out.extend_from_slice(&m.encode());
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        let (&t, rest) = b.split_first()?;
        let m = AttestedMessage::decode(rest).ok()?;
        match t {
            b'S' => Some(Self::Send(m)),
            b'R' => Some(Self::Recv(m)),
            _ => None,
        }
    }
}

fn value(m: &AttestedMessage) -> Option<u64> {
    Some(u64::from_be_bytes(m.payload.as_slice().try_into().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    /// Edits a logged value without fixing the digests.
    TamperEntry,
    /// Edits a logged value and recomputes every later digest.
    RechainEntry,
    /// Deletes one log entry.
    DropEntry,
    /// A child answers with a wrong sum (logged truthfully).
    WrongOutput,
    /// Sends a message without logging it.
    UnloggedSend,
    /// Logs a receive that never happened.
    ForgedReceive,
    /// Hides everything from its last send onwards.
    HideTail,
}

impl Deviation {
    pub const ALL: [Deviation; 7] = [
        Self::TamperEntry,
        Self::RechainEntry,
        Self::DropEntry,
        Self::WrongOutput,
        Self::UnloggedSend,
        Self::ForgedReceive,
        Self::HideTail,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exposure {
    Malformed,
    ForgedReceive,
    WrongOutput { expected: u64, found: u64 },
    SendGap { expected: u64, found: u64 },
    UnloggedSend { counter: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditOutcome {
    Consistent,
    ChainBreak { seq: u64 },
    Exposed { seq: u64, why: Exposure },
}

impl AuditOutcome {
    pub fn is_fault(&self) -> bool {
        !matches!(self, Self::Consistent)
    }
}

#[derive(Debug)]
struct Node {
    device: DeviceId,
    log: TamperEvidentLog,
    sum: u64,
    deviation: Option<(Deviation, u64)>,
    rounds_seen: u64,
}

impl Node {
    fn record(&mut self, ep: &mut Endpoint, r: Record) -> Result<(), DeviceError> {
        self.log.append(ep, &r.encode()).map(|_| ())
    }

    fn active(&self, d: Deviation) -> bool {
        matches!(self.deviation, Some((x, round)) if x == d && round == self.rounds_seen)
    }
}

/// What the witness remembers about a node between audits.
#[derive(Debug, Clone)]
struct AuditState {
    audited_seq: u64,
    digest: [u8; DIGEST_LEN],
    sum: u64,
    next_send: BTreeMap<SessionId, u64>,
    sends: BTreeSet<(SessionId, u64)>,
    received: Vec<(u64, AttestedMessage)>,
}

impl Default for AuditState {
    fn default() -> Self {
        Self {
            audited_seq: 0,
            digest: ZERO_DIGEST,
            sum: 0,
            next_send: BTreeMap::new(),
            sends: BTreeSet::new(),
            received: Vec::new(),
        }
    }
}

/// Holds every log and link key, uses them for tag checks only.
#[derive(Debug)]
pub struct Witness {
    kernel: Kernel,
    state: BTreeMap<DeviceId, AuditState>,
}

impl Witness {
    fn new(keys: &BTreeMap<SessionId, SessionKey>) -> Self {
        let mut kernel = Kernel::new(DeviceId(0));
        for (s, k) in keys {
            kernel.provision_session(*s, k.clone()).expect("distinct sessions");
        }
        Self {
            kernel,
            state: BTreeMap::new(),
        }
    }

    pub fn audited_seq(&self, d: DeviceId) -> u64 {
        self.state.get(&d).map_or(0, |s| s.audited_seq)
    }

    /// Audits the new entries of every node. State advances only for nodes
    /// found consistent.
    pub fn audit(&mut self, exports: &BTreeMap<DeviceId, Vec<LogEntry>>) -> BTreeMap<DeviceId, AuditOutcome> {
        let mut out = BTreeMap::new();
        let mut staged = BTreeMap::new();
        for (&d, entries) in exports {
            let st = self.state.get(&d).cloned().unwrap_or_default();
            match self.audit_one(d, entries, st) {
                Ok(next) => {
                    staged.insert(d, next);
                    out.insert(d, AuditOutcome::Consistent);
                }
                Err(o) => {
                    out.insert(d, o);
                }
            }
        }
        // every message a peer logged as received must be in its sender's log
        for st in staged.values() {
            for (_, m) in &st.received {
                let Some(sender) = staged.get(&m.device) else { continue };
                if !sender.sends.contains(&(m.session, m.counter)) {
                    out.insert(
                        m.device,
                        AuditOutcome::Exposed {
                            seq: sender.audited_seq,
                            why: Exposure::UnloggedSend { counter: m.counter },
                        },
                    );
                }
            }
        }
        for (d, st) in staged {
            if out[&d] == AuditOutcome::Consistent {
                self.state.insert(d, st);
            }
        }
        out
    }

    fn audit_one(&self, d: DeviceId, entries: &[LogEntry], mut st: AuditState) -> Result<AuditState, AuditOutcome> {
        let ls = log_session(d);
        verify_entries(entries, st.audited_seq, &st.digest, |e| {
            self.kernel.verify_tag(ls, &e.attested(d, ls)).is_ok()
        })
        .map_err(|crate::log::LogError::ChainBreak { seq }| AuditOutcome::ChainBreak { seq })?;
        for e in entries {
            let exposed = |why| AuditOutcome::Exposed { seq: e.seq, why };
            match Record::decode(&e.ctx).ok_or(exposed(Exposure::Malformed))? {
                Record::Recv(m) => {
                    let from_ok = if d == ROOT {
                        CHILDREN.contains(&m.device) && m.session == up_session(m.device)
                    } else {
                        m.device == ROOT && m.session == down_session(d)
                    };
                    if !from_ok || self.kernel.verify_tag(m.session, &m).is_err() {
                        return Err(exposed(Exposure::ForgedReceive));
                    }
                    if d != ROOT {
                        st.sum += value(&m).ok_or(exposed(Exposure::Malformed))?;
                    }
                    st.received.push((e.seq, m));
                }
                Record::Send(m) => {
                    if m.device != d || self.kernel.verify_tag(m.session, &m).is_err() {
                        return Err(exposed(Exposure::Malformed));
                    }
                    let next = st.next_send.entry(m.session).or_insert(0);
                    if m.counter != *next {
                        return Err(exposed(Exposure::SendGap {
                            expected: *next,
                            found: m.counter,
                        }));
                    }
                    *next += 1;
                    if d != ROOT {
                        let found = value(&m).ok_or(exposed(Exposure::Malformed))?;
                        if m.session != up_session(d) || found != st.sum {
                            return Err(exposed(Exposure::WrongOutput {
                                expected: st.sum,
                                found,
                            }));
                        }
                    }
                    st.sends.insert((m.session, m.counter));
                }
            }
        }
        if let Some(last) = entries.last() {
            st.audited_seq = last.seq + 1;
            st.digest = last.cum_digest;
        }
        Ok(st)
    }
}

/// Root plus two children on a [`SimNet`], with a witness.
pub struct PeerReview {
    pub net: SimNet,
    nodes: Vec<Node>,
    pub witness: Witness,
    rng: ChaCha8Rng,
    exported: BTreeMap<DeviceId, usize>,
    hidden: BTreeMap<DeviceId, usize>,
}

impl PeerReview {
    pub fn new(seed: u64, net_cfg: NetConfig) -> Result<Self, DeviceError> {
        Self::with_delay(seed, net_cfg, Duration::ZERO)
    }

    pub fn with_delay(seed: u64, net_cfg: NetConfig, delay: Duration) -> Result<Self, DeviceError> {
        let all: Vec<DeviceId> = std::iter::once(ROOT).chain(CHILDREN).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut key = || {
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            SessionKey::new(k)
        };
        let mut keys = BTreeMap::new();
        for &d in &all {
            keys.insert(log_session(d), key());
        }
        for c in CHILDREN {
            keys.insert(down_session(c), key());
            keys.insert(up_session(c), key());
        }
        let mut net = SimNet::new(all.iter().copied(), net_cfg);
        let handle = net.handle();
        let mut nodes = Vec::new();
        for &d in &all {
            let mut cfg = DeviceConfig::new(d).with_delay(delay).with_session(log_session(d), d, keys[&log_session(d)].clone());
            for c in CHILDREN {
                if d == ROOT || d == c {
                    let other = if d == ROOT { c } else { ROOT };
                    cfg = cfg
                        .with_session(down_session(c), other, keys[&down_session(c)].clone())
                        .with_session(up_session(c), other, keys[&up_session(c)].clone());
                }
            }
            net.attach(Endpoint::connect(cfg, &handle)?);
            nodes.push(Node {
                device: d,
                log: TamperEvidentLog::new(d, log_session(d)),
                sum: 0,
                deviation: None,
                rounds_seen: 0,
            });
        }
        Ok(Self {
            net,
            nodes,
            witness: Witness::new(&keys),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7072),
            exported: BTreeMap::new(),
            hidden: BTreeMap::new(),
        })
    }

    fn idx(d: DeviceId) -> usize {
        d.0 as usize - 1
    }

    /// Makes `device` deviate in its `round`-th round.
    pub fn set_deviation(&mut self, device: DeviceId, dev: Deviation, round: u64) {
        self.nodes[Self::idx(device)].deviation = Some((dev, round));
    }

    pub fn clock(&self, d: DeviceId) -> u64 {
        self.net.endpoint(d).map_or(0, |e| e.clock())
    }

    pub fn log(&self, d: DeviceId) -> &TamperEvidentLog {
        &self.nodes[Self::idx(d)].log
    }

    /// Root hands one item to each child; the network is then drained.
    pub fn round(&mut self) -> Result<(), DeviceError> {
        for c in CHILDREN {
            let v = self.rng.gen_range(1..1000u64);
            let ep = self.net.endpoint_mut(ROOT).unwrap();
            let m = ep.auth_send(down_session(c), &v.to_be_bytes())?;
            let root = &mut self.nodes[0];
            if !root.active(Deviation::UnloggedSend) || c != CHILDREN[1] {
                root.record(ep, Record::Send(m))?;
            }
        }
        while let Some(o) = self.net.step() {
            let Some(d) = o.device else { continue };
            let ep = self.net.endpoint_mut(d).unwrap();
            let node = &mut self.nodes[Self::idx(d)];
            for m in ep.poll_all() {
                node.record(ep, Record::Recv(m.clone()))?;
                if node.active(Deviation::ForgedReceive) {
                    let mut fake = m.clone();
                    fake.counter += 1_000;
                    fake.payload = 7u64.to_be_bytes().to_vec();
                    let mut tag = [0u8; TAG_LEN];
                    tag[..8].copy_from_slice(&fake.counter.to_be_bytes());
                    fake.tag = AttestationTag::from_bytes(tag);
                    node.record(ep, Record::Recv(fake))?;
                    node.sum += 7;
                }
                if d == ROOT {
                    continue;
                }
                node.sum += value(&m).unwrap_or(0);
                let mut out = node.sum;
                if node.active(Deviation::WrongOutput) {
                    out += 1;
                }
                let reply = ep.auth_send(up_session(d), &out.to_be_bytes())?;
                if !node.active(Deviation::UnloggedSend) {
                    node.record(ep, Record::Send(reply))?;
                }
            }
        }
        for n in &mut self.nodes {
            if let Some((dev, round)) = n.deviation {
                if round == n.rounds_seen {
                    Self::apply_offline(n, dev, &mut self.rng, *self.exported.get(&n.device).unwrap_or(&0), &mut self.hidden);
                }
            }
            n.rounds_seen += 1;
        }
        Ok(())
    }

    fn apply_offline(n: &mut Node, dev: Deviation, rng: &mut ChaCha8Rng, from: usize, hidden: &mut BTreeMap<DeviceId, usize>) {
        let len = n.log.len();
        if len <= from {
            return;
        }
        // a dropped entry always has a successor; dropping the newest one
        // is the same as not having written it yet
        let end = if dev == Deviation::DropEntry { len - 1 } else { len };
        if end <= from {
            return;
        }
        let i = rng.gen_range(from..end);
        let mut forged = n.log.entries()[i].ctx.clone();
        let last = forged.len() - 1;
        forged[last] ^= 1;
        match dev {
            Deviation::TamperEntry => n.log.rewrite_entry_unchecked(i, forged),
            Deviation::RechainEntry => n.log.rewrite_and_rechain(i, forged),
            Deviation::DropEntry => n.log.remove_entry_unchecked(i),
            Deviation::HideTail => {
                let last_send = n.log.entries()[from..]
                    .iter()
                    .rposition(|e| e.ctx.first() == Some(&b'S'))
                    .map(|p| p + from);
                if let Some(p) = last_send {
                    hidden.insert(n.device, p);
                }
            }
            _ => {}
        }
    }

    /// Each node hands the witness its entries since the last audit.
    pub fn audit(&mut self) -> BTreeMap<DeviceId, AuditOutcome> {
        let mut exports = BTreeMap::new();
        for n in &self.nodes {
            let from = *self.exported.get(&n.device).unwrap_or(&0);
            let to = self.hidden.get(&n.device).copied().unwrap_or(n.log.len()).max(from);
            exports.insert(n.device, n.log.entries()[from..to].to_vec());
        }
        let out = self.witness.audit(&exports);
        for (d, o) in &out {
            if *o == AuditOutcome::Consistent {
                let n = exports[d].len();
                *self.exported.entry(*d).or_insert(0) += n;
            }
        }
        out
    }
}

/// One seeded scenario. `deviation = None` is a control run.
#[derive(Debug, Clone)]
pub struct PrScenario {
    pub seed: u64,
    pub deviation: Option<(DeviceId, Deviation)>,
    pub rounds: u64,
}

impl PrScenario {
    pub fn generate(seed: u64, faulty: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let deviation = faulty.then(|| {
            let dev = Deviation::ALL[(seed % 7) as usize];
            let target = if dev == Deviation::WrongOutput || rng.gen_bool(0.5) {
                CHILDREN[rng.gen_range(0..2)]
            } else {
                ROOT
            };
            (target, dev)
        });
        Self {
            seed,
            deviation,
            rounds: rng.gen_range(4..=8),
        }
    }

    /// Runs the rounds with one mid-run audit; returns the final outcomes
    /// (the first fault found for each node).
    pub fn run(&self) -> Result<BTreeMap<DeviceId, AuditOutcome>, DeviceError> {
        let mut pr = PeerReview::new(self.seed, NetConfig::default())?;
        let mut sched = FaultSchedule::new(self.seed);
        sched.rules.push(FaultRule::new(FaultAction::Duplicate).times(2));
        sched.rules.push(FaultRule::new(FaultAction::Reorder).times(1));
        pr.net.set_schedule(sched);
        let mid = self.rounds / 2;
        if let Some((d, dev)) = self.deviation {
            pr.set_deviation(d, dev, mid + (self.seed % (self.rounds - mid)));
        }
        let mut result: BTreeMap<DeviceId, AuditOutcome> = BTreeMap::new();
        for r in 0..self.rounds {
            pr.round()?;
            if r + 1 == mid || r + 1 == self.rounds {
                for (d, o) in pr.audit() {
                    let slot = result.entry(d).or_insert(AuditOutcome::Consistent);
                    if !slot.is_fault() {
                        *slot = o;
                    }
                }
            }
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn honest_run_is_consistent_across_audits() {
        let mut pr = PeerReview::new(1, NetConfig::default()).unwrap();
        for _ in 0..3 {
            pr.round().unwrap();
            assert!(pr.audit().values().all(|o| *o == AuditOutcome::Consistent));
        }
        assert_eq!(pr.witness.audited_seq(ROOT), 12);
        assert_eq!(pr.witness.audited_seq(CHILDREN[0]), 6);
    }

    #[test]
    fn each_deviation_on_a_child_is_caught() {
        for dev in Deviation::ALL {
            let mut pr = PeerReview::new(2, NetConfig::default()).unwrap();
            pr.set_deviation(CHILDREN[0], dev, 1);
            pr.round().unwrap();
            pr.audit();
            pr.round().unwrap();
            pr.round().unwrap();
            let out = pr.audit();
            assert!(out[&CHILDREN[0]].is_fault(), "{dev:?} -> {:?}", out[&CHILDREN[0]]);
            assert_eq!(out[&CHILDREN[1]], AuditOutcome::Consistent, "{dev:?}");
        }
    }

    #[test]
    fn rechained_forgery_is_a_chain_break() {
        let mut pr = PeerReview::new(3, NetConfig::default()).unwrap();
        pr.set_deviation(ROOT, Deviation::RechainEntry, 0);
        pr.round().unwrap();
        assert!(matches!(pr.audit()[&ROOT], AuditOutcome::ChainBreak { .. }));
    }

    #[test]
    fn record_codec() {
        let mut k = Kernel::new(DeviceId(4));
        k.provision_session(SessionId(1), SessionKey::new([3; 32])).unwrap();
        let m = k.attest(SessionId(1), b"abc").unwrap();
        for r in [Record::Send(m.clone()), Record::Recv(m)] {
            assert_eq!(Record::decode(&r.encode()), Some(r));
        }
    }
}
