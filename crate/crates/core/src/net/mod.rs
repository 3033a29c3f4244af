//! Deterministic discrete-event network.
//!
//! The base contract is a reliable FIFO channel per `(from, to, session)`,
//! standing in for a reliable-connection transport. The transport keeps every
//! original frame until the receiving kernel accepts it; any attempt that is
//! dropped or rejected is retransmitted byte-identical after a timeout, up to
//! a retry budget. Duplicate and stale copies never trigger retransmission.
//!
//! The adversary ([`FaultSchedule`]) sits on the wire between two kernels and
//! acts on individual transmission attempts. It can hurt liveness (exhaust a
//! retry budget) but a correct kernel never accepts anything it should not.
//!
//! Events are processed in `(time, sequence)` order; given the same
//! endpoints, workload and schedule, the trace is identical run to run.

pub mod schedule;
pub mod socket;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::device::{DeviceError, Endpoint, NetHandle, Outgoing, RejectKind, SimTime};
use crate::kernel::{DeviceId, KernelError, SessionId, MAC_LEN, TAG_LEN};
use crate::wire::WireFrame;

pub use schedule::{FaultAction, FaultRule, FaultSchedule, ScheduleError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub link_latency_ns: u64,
    pub retransmit_timeout_ns: u64,
    pub retry_budget: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            link_latency_ns: 1_000,
            retransmit_timeout_ns: 10_000,
            retry_budget: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Delivered,
    Dropped,
    Tampered,
    Duplicated,
    Forged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected(RejectKind),
    NotDelivered,
    TargetDown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NetEvent {
    pub time: SimTime,
    pub seq: u64,
    pub from: DeviceId,
    pub to: DeviceId,
    pub session: SessionId,
    pub index: Option<u64>,
    pub attempt: Option<u32>,
    #[serde(serialize_with = "as_hex")]
    pub frame: Vec<u8>,
    pub disposition: Disposition,
    pub verdict: Verdict,
}

fn as_hex<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bytes))
}

/// A frame the transport gave up on after exhausting its retry budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("retry budget exhausted for frame {index} on {session} from {from} to {to}")]
pub struct RetryBudgetExhausted {
    pub from: DeviceId,
    pub to: DeviceId,
    pub session: SessionId,
    pub index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub time: SimTime,
    /// Endpoint that had a frame arrive, if any.
    pub device: Option<DeviceId>,
    pub accepted: bool,
}

type ChannelKey = (DeviceId, DeviceId, SessionId);

#[derive(Debug, Default)]
struct Channel {
    frames: Vec<OriginalFrame>,
    held: Option<(u64, u32)>,
}

#[derive(Debug)]
struct OriginalFrame {
    bytes: Vec<u8>,
    acked: bool,
    attempts: u32,
}

#[derive(Debug)]
enum Pending {
    Arrival {
        key: ChannelKey,
        bytes: Vec<u8>,
        origin: Option<(u64, u32)>,
        disposition: Disposition,
    },
    Retransmit {
        key: ChannelKey,
        index: u64,
    },
}

#[derive(Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    item: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

pub struct SimNet {
    cfg: NetConfig,
    now: SimTime,
    seq: u64,
    devices: Vec<DeviceId>,
    endpoints: BTreeMap<DeviceId, Endpoint>,
    crashed: BTreeSet<DeviceId>,
    tx: mpsc::Sender<Outgoing>,
    rx: mpsc::Receiver<Outgoing>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    channels: BTreeMap<ChannelKey, Channel>,
    schedule: FaultSchedule,
    rule_hits: Vec<u32>,
    rng: ChaCha8Rng,
    trace: Vec<NetEvent>,
    failures: Vec<RetryBudgetExhausted>,
}

impl SimNet {
    pub fn new(devices: impl IntoIterator<Item = DeviceId>, cfg: NetConfig) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            cfg,
            now: 0,
            seq: 0,
            devices: devices.into_iter().collect(),
            endpoints: BTreeMap::new(),
            crashed: BTreeSet::new(),
            tx,
            rx,
            queue: BinaryHeap::new(),
            channels: BTreeMap::new(),
            schedule: FaultSchedule::default(),
            rule_hits: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            trace: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn handle(&self) -> NetHandle {
        NetHandle::new(self.tx.clone(), self.devices.iter().copied())
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn attach(&mut self, ep: Endpoint) {
        self.endpoints.insert(ep.device(), ep);
    }

    pub fn endpoint(&self, device: DeviceId) -> Option<&Endpoint> {
        self.endpoints.get(&device)
    }

    pub fn endpoint_mut(&mut self, device: DeviceId) -> Option<&mut Endpoint> {
        self.endpoints.get_mut(&device)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &Endpoint> {
        self.endpoints.values()
    }

    pub fn set_schedule(&mut self, schedule: FaultSchedule) {
        self.rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        self.rule_hits = vec![0; schedule.rules.len()];
        self.schedule = schedule;
    }

    /// Crash-stops a device: frames to it are lost and it sends nothing
    /// further. Frames it handed to the network before the crash still go
    /// out once, but are never retransmitted.
    pub fn crash(&mut self, device: DeviceId) {
        self.pump();
        self.crashed.insert(device);
    }

    pub fn is_crashed(&self, device: DeviceId) -> bool {
        self.crashed.contains(&device)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn trace(&self) -> &[NetEvent] {
        &self.trace
    }

    pub fn liveness_failures(&self) -> &[RetryBudgetExhausted] {
        &self.failures
    }

    /// The trace as JSON lines; byte-identical across reruns.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn is_quiescent(&mut self) -> bool {
        self.pump();
        self.queue.is_empty() && self.channels.values().all(|c| c.held.is_none())
    }

    /// Processes one event. Returns `None` once nothing is pending.
    pub fn step(&mut self) -> Option<StepOutcome> {
        self.pump();
        if self.queue.is_empty() {
            self.release_held();
        }
        let Reverse(next) = self.queue.pop()?;
        self.now = self.now.max(next.time);
        Some(match next.item {
            Pending::Arrival {
                key,
                bytes,
                origin,
                disposition,
            } => self.arrive(key, bytes, origin, disposition),
            Pending::Retransmit { key, index } => {
                self.retransmit(key, index);
                StepOutcome {
                    time: self.now,
                    device: None,
                    accepted: false,
                }
            }
        })
    }

    pub fn run_until_quiescent(&mut self) {
        while self.step().is_some() {}
    }

    /// Installs `schedule`, drains the network and returns the trace.
    pub fn deliver_loop(&mut self, schedule: FaultSchedule) -> Vec<NetEvent> {
        self.set_schedule(schedule);
        self.run_until_quiescent();
        self.trace.clone()
    }

    fn push(&mut self, time: SimTime, item: Pending) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time,
            seq: self.seq,
            item,
        }));
    }

    fn record(
        &mut self,
        key: ChannelKey,
        bytes: Vec<u8>,
        origin: Option<(u64, u32)>,
        disposition: Disposition,
        verdict: Verdict,
    ) {
        self.seq += 1;
        self.trace.push(NetEvent {
            time: self.now,
            seq: self.seq,
            from: key.0,
            to: key.1,
            session: key.2,
            index: origin.map(|o| o.0),
            attempt: origin.map(|o| o.1),
            frame: bytes,
            disposition,
            verdict,
        });
    }

    fn pump(&mut self) {
        while let Ok(out) = self.rx.try_recv() {
            if self.crashed.contains(&out.from) {
                continue;
            }
            let key = (out.from, out.to, out.frame.session);
            let chan = self.channels.entry(key).or_default();
            let index = chan.frames.len() as u64;
            chan.frames.push(OriginalFrame {
                bytes: out.frame.encode(),
                acked: false,
                attempts: 0,
            });
            let at = out.ready_at.max(self.now);
            self.transmit(key, index, 0, at);
        }
    }

    fn next_action(&mut self, key: ChannelKey, index: u64, attempt: u32) -> Option<FaultAction> {
        let (from, to, session) = key;
        for (i, rule) in self.schedule.rules.iter().enumerate() {
            if rule.times.is_some_and(|t| self.rule_hits[i] >= t) {
                continue;
            }
            if rule.matches(from, to, session, index, attempt) {
                self.rule_hits[i] += 1;
                return Some(rule.action.clone());
            }
        }
        None
    }

    fn transmit(&mut self, key: ChannelKey, index: u64, attempt: u32, at: SimTime) {
        let lat = self.cfg.link_latency_ns;
        let bytes = self.channels[&key].frames[index as usize].bytes.clone();
        let origin = Some((index, attempt));
        let held = if attempt == 0 {
            self.channels.get_mut(&key).unwrap().held.take()
        } else {
            None
        };
        let mut action = self.next_action(key, index, attempt);
        if held.is_some() && action == Some(FaultAction::Reorder) {
            action = None;
        }
        let arrival = |bytes, disposition| Pending::Arrival {
            key,
            bytes,
            origin,
            disposition,
        };
        match action {
            None => self.push(at + lat, arrival(bytes, Disposition::Delivered)),
            Some(FaultAction::Drop) => {
                let saved = self.now;
                self.now = self.now.max(at);
                self.record(key, bytes, origin, Disposition::Dropped, Verdict::NotDelivered);
                self.now = saved;
                self.push(at + self.cfg.retransmit_timeout_ns, Pending::Retransmit { key, index });
            }
            Some(FaultAction::Duplicate) => {
                self.push(at + lat, arrival(bytes.clone(), Disposition::Delivered));
                self.push(
                    at + lat,
                    Pending::Arrival {
                        key,
                        bytes,
                        origin: None,
                        disposition: Disposition::Duplicated,
                    },
                );
            }
            Some(FaultAction::Delay { ns }) => self.push(at + lat + ns, arrival(bytes, Disposition::Delivered)),
            Some(FaultAction::Reorder) => {
                self.channels.get_mut(&key).unwrap().held = Some((index, attempt));
            }
            Some(FaultAction::TamperBit { offset }) => {
                let mut bytes = bytes;
                let bits = bytes.len() as u32 * 8;
                let bit = offset.unwrap_or_else(|| self.rng.gen_range(0..bits)) % bits;
                bytes[(bit / 8) as usize] ^= 1 << (bit % 8);
                self.push(at + lat, arrival(bytes, Disposition::Tampered));
            }
            Some(FaultAction::Replay { index: earlier }) => {
                let old = self.channels[&key]
                    .frames
                    .get(earlier as usize)
                    .map(|f| f.bytes.clone());
                self.push(at + lat, arrival(bytes, Disposition::Delivered));
                if let Some(old) = old {
                    self.push(
                        at + lat,
                        Pending::Arrival {
                            key,
                            bytes: old,
                            origin: None,
                            disposition: Disposition::Duplicated,
                        },
                    );
                }
            }
            Some(FaultAction::InjectForged { frame_hex }) => {
                let forged = match frame_hex.and_then(|h| hex::decode(h).ok()) {
                    Some(b) => b,
                    None => self.forge_like(&bytes),
                };
                self.push(
                    at + lat,
                    Pending::Arrival {
                        key,
                        bytes: forged,
                        origin: None,
                        disposition: Disposition::Forged,
                    },
                );
                self.push(at + lat, arrival(bytes, Disposition::Delivered));
            }
        }
        if let Some((h_index, h_attempt)) = held {
            self.push(
                at + lat,
                Pending::Arrival {
                    key,
                    bytes: self.channels[&key].frames[h_index as usize].bytes.clone(),
                    origin: Some((h_index, h_attempt)),
                    disposition: Disposition::Delivered,
                },
            );
        }
    }

    /// Same header as `template`, fresh payload and a random tag.
    fn forge_like(&mut self, template: &[u8]) -> Vec<u8> {
        let Ok(mut frame) = WireFrame::decode(template) else {
            return template.to_vec();
        };
        self.rng.fill(&mut frame.payload[..]);
        let mut tag = [0u8; TAG_LEN];
        self.rng.fill(&mut tag[..MAC_LEN]);
        frame.tag = crate::kernel::AttestationTag::from_bytes(tag);
        frame.encode()
    }

    fn release_held(&mut self) {
        let held: Vec<(ChannelKey, (u64, u32))> = self
            .channels
            .iter_mut()
            .filter_map(|(k, c)| c.held.take().map(|h| (*k, h)))
            .collect();
        for (key, (index, attempt)) in held {
            let bytes = self.channels[&key].frames[index as usize].bytes.clone();
            self.push(
                self.now + self.cfg.link_latency_ns,
                Pending::Arrival {
                    key,
                    bytes,
                    origin: Some((index, attempt)),
                    disposition: Disposition::Delivered,
                },
            );
        }
    }

    fn arrive(
        &mut self,
        key: ChannelKey,
        bytes: Vec<u8>,
        origin: Option<(u64, u32)>,
        disposition: Disposition,
    ) -> StepOutcome {
        let to = key.1;
        let now = self.now;
        let target = if self.crashed.contains(&to) {
            None
        } else {
            self.endpoints.get_mut(&to)
        };
        let Some(ep) = target else {
            self.record(key, bytes, origin, disposition, Verdict::TargetDown);
            return StepOutcome {
                time: now,
                device: None,
                accepted: false,
            };
        };
        ep.advance_clock_to(now);
        let result = ep.ingest_bytes(&bytes);
        let verdict = match &result {
            Ok(()) => Verdict::Accepted,
            Err(e) => Verdict::Rejected(RejectKind::of(e)),
        };
        // The receiver already holds this counter (e.g. it arrived through a
        // forwarding path), so the transport treats the copy as delivered.
        let already_held = matches!(
            &result,
            Err(DeviceError::Kernel(KernelError::CounterMismatch { expected, found, .. })) if found < expected
        );
        if let Some((index, _)) = origin {
            let frame = &mut self.channels.get_mut(&key).unwrap().frames[index as usize];
            if result.is_ok() || already_held {
                frame.acked = true;
            } else if !frame.acked {
                self.push(now + self.cfg.retransmit_timeout_ns, Pending::Retransmit { key, index });
            }
        }
        self.record(key, bytes, origin, disposition, verdict);
        StepOutcome {
            time: now,
            device: Some(to),
            accepted: result.is_ok(),
        }
    }

    fn retransmit(&mut self, key: ChannelKey, index: u64) {
        if self.crashed.contains(&key.0) {
            return;
        }
        let frame = &mut self.channels.get_mut(&key).unwrap().frames[index as usize];
        if frame.acked {
            return;
        }
        frame.attempts += 1;
        if frame.attempts > self.cfg.retry_budget {
            self.failures.push(RetryBudgetExhausted {
                from: key.0,
                to: key.1,
                session: key.2,
                index,
            });
            return;
        }
        let attempt = frame.attempts;
        self.transmit(key, index, attempt, self.now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceConfig;
    use crate::kernel::SessionKey;

    const A: DeviceId = DeviceId(1);
    const B: DeviceId = DeviceId(2);
    const S: SessionId = SessionId(5);

    fn two_nodes() -> SimNet {
        let mut net = SimNet::new([A, B], NetConfig::default());
        let h = net.handle();
        let key = SessionKey::new([3; 32]);
        net.attach(Endpoint::connect(DeviceConfig::new(A).with_session(S, B, key.clone()), &h).unwrap());
        net.attach(Endpoint::connect(DeviceConfig::new(B).with_session(S, A, key), &h).unwrap());
        net
    }

    fn send_n(net: &mut SimNet, n: u8) {
        for i in 0..n {
            net.endpoint_mut(A).unwrap().auth_send(S, &[i]).unwrap();
        }
    }

    fn received(net: &mut SimNet) -> Vec<u64> {
        net.endpoint_mut(B)
            .unwrap()
            .poll(S, usize::MAX)
            .iter()
            .map(|m| m.counter)
            .collect()
    }

    #[test]
    fn empty_schedule_is_fifo_exactly_once() {
        let mut net = two_nodes();
        send_n(&mut net, 10);
        let trace = net.deliver_loop(FaultSchedule::default());
        assert_eq!(trace.len(), 10);
        assert!(trace
            .iter()
            .all(|e| e.disposition == Disposition::Delivered && e.verdict == Verdict::Accepted));
        let idx: Vec<u64> = trace.iter().map(|e| e.index.unwrap()).collect();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert_eq!(received(&mut net), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn dropped_frame_is_retransmitted() {
        let mut net = two_nodes();
        send_n(&mut net, 10);
        let sched = FaultSchedule::new(1).with_rule(FaultRule::new(FaultAction::Drop).at_index(3).at_attempt(0));
        let trace = net.deliver_loop(sched);
        assert_eq!(trace.iter().filter(|e| e.disposition == Disposition::Dropped).count(), 1);
        assert_eq!(received(&mut net), (0..10).collect::<Vec<_>>());
        assert!(net.liveness_failures().is_empty());
    }

    #[test]
    fn forged_frame_never_reaches_poll() {
        let mut net = two_nodes();
        send_n(&mut net, 3);
        let sched = FaultSchedule::new(9)
            .with_rule(FaultRule::new(FaultAction::InjectForged { frame_hex: None }).at_index(1).times(1));
        let trace = net.deliver_loop(sched);
        let forged: Vec<&NetEvent> = trace.iter().filter(|e| e.disposition == Disposition::Forged).collect();
        assert_eq!(forged.len(), 1);
        assert_eq!(forged[0].verdict, Verdict::Rejected(RejectKind::AuthFailure));
        let polled = net.endpoint_mut(B).unwrap().poll(S, 10);
        assert_eq!(polled.iter().map(|m| m.payload[0]).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn swapped_pair_ends_in_send_order() {
        let mut net = two_nodes();
        send_n(&mut net, 2);
        let sched = FaultSchedule::new(0).with_rule(FaultRule::new(FaultAction::Reorder).at_index(0).at_attempt(0));
        let trace = net.deliver_loop(sched);
        assert_eq!(trace[0].index, Some(1));
        assert_eq!(trace[0].verdict, Verdict::Rejected(RejectKind::CounterMismatch));
        assert_eq!(received(&mut net), vec![0, 1]);
    }

    #[test]
    fn duplicates_and_replays_rejected_without_retransmit() {
        let mut net = two_nodes();
        send_n(&mut net, 4);
        let sched = FaultSchedule::new(0)
            .with_rule(FaultRule::new(FaultAction::Duplicate).at_index(0))
            .with_rule(FaultRule::new(FaultAction::Replay { index: 0 }).at_index(2));
        let trace = net.deliver_loop(sched);
        let dups = trace.iter().filter(|e| e.disposition == Disposition::Duplicated).count();
        assert_eq!(dups, 2);
        assert_eq!(trace.len(), 6);
        assert_eq!(received(&mut net), vec![0, 1, 2, 3]);
    }

    #[test]
    fn tampered_attempt_is_retransmitted() {
        let mut net = two_nodes();
        send_n(&mut net, 2);
        let sched = FaultSchedule::new(4).with_rule(FaultRule::new(FaultAction::TamperBit { offset: None }).at_attempt(0));
        net.deliver_loop(sched);
        assert_eq!(received(&mut net), vec![0, 1]);
    }

    #[test]
    fn drop_everything_exhausts_budget_and_accepts_nothing() {
        let mut net = two_nodes();
        send_n(&mut net, 3);
        let trace = net.deliver_loop(FaultSchedule::new(0).with_rule(FaultRule::new(FaultAction::Drop)));
        assert_eq!(net.liveness_failures().len(), 3);
        assert_eq!(trace.len(), 3 * 17);
        assert!(received(&mut net).is_empty());
        assert_eq!(net.endpoint(B).unwrap().diagnostics().accepted, 0);
    }

    #[test]
    fn no_traffic_is_immediately_quiescent() {
        let mut net = two_nodes();
        assert!(net.step().is_none());
        assert!(net.is_quiescent());
    }

    #[test]
    fn ping_pong_hundred_rounds() {
        const BACK: SessionId = SessionId(6);
        let mut net = SimNet::new([A, B], NetConfig::default());
        let h = net.handle();
        let (k1, k2) = (SessionKey::new([3; 32]), SessionKey::new([4; 32]));
        net.attach(
            Endpoint::connect(
                DeviceConfig::new(A).with_session(S, B, k1.clone()).with_session(BACK, B, k2.clone()),
                &h,
            )
            .unwrap(),
        );
        net.attach(Endpoint::connect(DeviceConfig::new(B).with_session(S, A, k1).with_session(BACK, A, k2), &h).unwrap());
        let mut deliveries = 0;
        net.endpoint_mut(A).unwrap().auth_send(S, b"ping").unwrap();
        while let Some(o) = net.step() {
            let Some(d) = o.device else { continue };
            deliveries += 1;
            let ep = net.endpoint_mut(d).unwrap();
            let (inbound, outbound) = if d == B { (S, BACK) } else { (BACK, S) };
            for m in ep.poll(inbound, usize::MAX) {
                if d == B || m.counter + 1 < 100 {
                    ep.auth_send(outbound, &m.payload).unwrap();
                }
            }
        }
        assert_eq!(deliveries, 200);
    }

    #[test]
    fn crashed_target_drops_silently() {
        let mut net = two_nodes();
        net.crash(B);
        send_n(&mut net, 2);
        let trace = net.deliver_loop(FaultSchedule::default());
        assert!(trace.iter().all(|e| e.verdict == Verdict::TargetDown));
    }

    #[test]
    fn traces_are_deterministic() {
        let run = || {
            let mut net = two_nodes();
            send_n(&mut net, 8);
            net.deliver_loop(
                FaultSchedule::new(77)
                    .with_rule(FaultRule::new(FaultAction::TamperBit { offset: None }).times(3))
                    .with_rule(FaultRule::new(FaultAction::InjectForged { frame_hex: None }).at_index(5)),
            );
            net.trace_jsonl()
        };
        assert_eq!(run(), run());
    }
}
