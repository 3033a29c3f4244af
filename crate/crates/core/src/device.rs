//! Emulated TNIC endpoint.
//!
//! An [`Endpoint`] binds one [`Kernel`] to a transport. Outbound traffic is
//! attested and handed to the transport as a [`WireFrame`]; inbound frames
//! pass through the kernel before anything reaches the inbox, so `poll` only
//! ever returns verified messages, in counter order per session.
//!
//! Each endpoint keeps a device clock in simulated nanoseconds. Every
//! attestation and verification advances it by the configured delay; in
//! [`DelayMode::BusyWait`] the same delay is also spent spinning on the wall
//! clock.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::kernel::{
    AttestedMessage, DeviceId, Kernel, KernelError, SessionId, SessionKey, DEFAULT_MAX_PAYLOAD,
};
use crate::wire::{CodecError, WireFrame};

/// Simulated time in nanoseconds.
pub type SimTime = u64;

/// Per-operation latency of the emulated attestation hardware.
pub const TNIC_DELAY: Duration = Duration::from_micros(23);
pub const SGX_DELAY: Duration = Duration::from_micros(45);
pub const AMD_SEV_DELAY: Duration = Duration::from_micros(30);

const REJECTION_HISTORY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelayMode {
    /// Delays only advance the device clock.
    #[default]
    Simulated,
    /// Delays advance the device clock and also spin on the wall clock.
    BusyWait,
}

#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub session: SessionId,
    /// The device allowed to originate traffic on this session, and the
    /// default destination of `auth_send`.
    pub peer: DeviceId,
    pub key: SessionKey,
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub device: DeviceId,
    pub sessions: Vec<SessionSpec>,
    pub attest_delay: Duration,
    /// Defaults to `attest_delay` when unset.
    pub verify_delay: Option<Duration>,
    pub max_payload: usize,
    /// Soft cap on buffered inbound messages; exceeding it is only counted.
    pub inbox_soft_cap: usize,
    pub delay_mode: DelayMode,
}

impl DeviceConfig {
    pub fn new(device: DeviceId) -> Self {
        Self {
            device,
            sessions: Vec::new(),
            attest_delay: Duration::ZERO,
            verify_delay: None,
            max_payload: DEFAULT_MAX_PAYLOAD,
            inbox_soft_cap: 4096,
            delay_mode: DelayMode::Simulated,
        }
    }

    pub fn with_session(mut self, session: SessionId, peer: DeviceId, key: SessionKey) -> Self {
        self.sessions.push(SessionSpec { session, peer, key });
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.attest_delay = delay;
        self.verify_delay = None;
        self
    }

    pub fn verify_delay(&self) -> Duration {
        self.verify_delay.unwrap_or(self.attest_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("peer {0} is not reachable through this transport")]
    UnknownPeer(DeviceId),
    #[error("transport closed")]
    TransportClosed,
    #[error("{session} only accepts traffic from {expected}, frame claims {found}")]
    WrongDevice {
        session: SessionId,
        expected: DeviceId,
        found: DeviceId,
    },
    #[error("device identity is frozen; re-provisioning refused")]
    IdentityFrozen,
}

/// One frame handed from an endpoint to its transport.
#[derive(Debug, Clone)]
pub struct Outgoing {
    pub from: DeviceId,
    pub to: DeviceId,
    pub ready_at: SimTime,
    pub frame: WireFrame,
}

/// Submission side of a transport. Cloneable and `Send`; the receiving half
/// lives in the simulator or in a socket bridge.
#[derive(Debug, Clone)]
pub struct NetHandle {
    tx: mpsc::Sender<Outgoing>,
    reachable: Arc<BTreeSet<DeviceId>>,
}

impl NetHandle {
    pub fn new(tx: mpsc::Sender<Outgoing>, reachable: impl IntoIterator<Item = DeviceId>) -> Self {
        Self {
            tx,
            reachable: Arc::new(reachable.into_iter().collect()),
        }
    }

    pub fn is_reachable(&self, device: DeviceId) -> bool {
        self.reachable.contains(&device)
    }

    fn submit(&self, out: Outgoing) -> Result<(), DeviceError> {
        self.tx.send(out).map_err(|_| DeviceError::TransportClosed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectKind {
    AuthFailure,
    CounterMismatch,
    UnknownSession,
    WrongDevice,
    PayloadTooLarge,
    Codec,
    Other,
}

impl RejectKind {
    pub fn of(err: &DeviceError) -> Self {
        match err {
            DeviceError::Kernel(KernelError::AuthFailure { .. }) => Self::AuthFailure,
            DeviceError::Kernel(KernelError::CounterMismatch { .. }) => Self::CounterMismatch,
            DeviceError::Kernel(KernelError::UnknownSession(_)) => Self::UnknownSession,
            DeviceError::Kernel(KernelError::PayloadTooLarge { .. }) => Self::PayloadTooLarge,
            DeviceError::WrongDevice { .. } => Self::WrongDevice,
            DeviceError::Codec(_) => Self::Codec,
            _ => Self::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub session: Option<SessionId>,
    pub counter: Option<u64>,
    pub kind: RejectKind,
}

/// Observable counters of one endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub attested: u64,
    pub accepted: u64,
    pub local_verified: u64,
    pub rejected: BTreeMap<RejectKind, u64>,
    pub inbox_over_cap: u64,
    pub recent_rejections: VecDeque<Rejection>,
}

impl Diagnostics {
    pub fn rejections(&self, kind: RejectKind) -> u64 {
        self.rejected.get(&kind).copied().unwrap_or(0)
    }

    pub fn total_rejections(&self) -> u64 {
        self.rejected.values().sum()
    }

    fn record(&mut self, session: Option<SessionId>, counter: Option<u64>, err: &DeviceError) {
        let kind = RejectKind::of(err);
        *self.rejected.entry(kind).or_default() += 1;
        if self.recent_rejections.len() == REJECTION_HISTORY {
            self.recent_rejections.pop_front();
        }
        self.recent_rejections.push_back(Rejection { session, counter, kind });
    }
}

#[derive(Debug)]
pub struct Endpoint {
    device: DeviceId,
    attest_delay: Duration,
    verify_delay: Duration,
    delay_mode: DelayMode,
    inbox_soft_cap: usize,
    kernel: Kernel,
    peers: BTreeMap<SessionId, DeviceId>,
    local_verify_cnt: BTreeMap<SessionId, u64>,
    inbox: BTreeMap<SessionId, VecDeque<(u64, AttestedMessage)>>,
    inbox_len: usize,
    arrival_seq: u64,
    last_sent: BTreeMap<SessionId, AttestedMessage>,
    transport: NetHandle,
    clock: SimTime,
    diagnostics: Diagnostics,
    bitstream_measurement: Option<[u8; 48]>,
    frozen: bool,
}

impl Endpoint {
    /// Creates the endpoint and provisions every configured session with
    /// zeroed counters.
    pub fn connect(config: DeviceConfig, net: &NetHandle) -> Result<Self, DeviceError> {
        let mut ep = Self {
            device: config.device,
            attest_delay: config.attest_delay,
            verify_delay: config.verify_delay(),
            delay_mode: config.delay_mode,
            inbox_soft_cap: config.inbox_soft_cap,
            kernel: Kernel::with_max_payload(config.device, config.max_payload),
            peers: BTreeMap::new(),
            local_verify_cnt: BTreeMap::new(),
            inbox: BTreeMap::new(),
            inbox_len: 0,
            arrival_seq: 0,
            last_sent: BTreeMap::new(),
            transport: net.clone(),
            clock: 0,
            diagnostics: Diagnostics::default(),
            bitstream_measurement: None,
            frozen: false,
        };
        ep.add_sessions(config.sessions)?;
        Ok(ep)
    }

    fn add_sessions(&mut self, sessions: Vec<SessionSpec>) -> Result<(), DeviceError> {
        let mut seen = BTreeSet::new();
        for s in &sessions {
            if !seen.insert(s.session) || self.peers.contains_key(&s.session) {
                return Err(KernelError::DuplicateSession(s.session).into());
            }
            if s.peer != self.device && !self.transport.is_reachable(s.peer) {
                return Err(DeviceError::UnknownPeer(s.peer));
            }
        }
        for s in sessions {
            self.kernel.provision_session(s.session, s.key)?;
            self.peers.insert(s.session, s.peer);
        }
        Ok(())
    }

    /// Installs sessions delivered by the provisioning channel and freezes
    /// the identity. A second call fails with `IdentityFrozen`.
    pub fn install_provisioned(
        &mut self,
        sessions: Vec<SessionSpec>,
        bitstream_measurement: [u8; 48],
    ) -> Result<(), DeviceError> {
        if self.frozen {
            return Err(DeviceError::IdentityFrozen);
        }
        self.add_sessions(sessions)?;
        self.bitstream_measurement = Some(bitstream_measurement);
        self.frozen = true;
        Ok(())
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn peer(&self, session: SessionId) -> Option<DeviceId> {
        self.peers.get(&session).copied()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn bitstream_measurement(&self) -> Option<&[u8; 48]> {
        self.bitstream_measurement.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// The most recent message this endpoint attested on `session`.
    pub fn last_sent(&self, session: SessionId) -> Option<&AttestedMessage> {
        self.last_sent.get(&session)
    }

    pub fn advance_clock_to(&mut self, t: SimTime) {
        self.clock = self.clock.max(t);
    }

    /// Charges host-side work to the device clock.
    pub fn charge(&mut self, d: Duration) {
        self.clock += d.as_nanos() as SimTime;
        if self.delay_mode == DelayMode::BusyWait && !d.is_zero() {
            let start = Instant::now();
            while start.elapsed() < d {
                std::hint::spin_loop();
            }
        }
    }

    /// Attests `payload` without transmitting it.
    pub fn local_send(&mut self, session: SessionId, payload: &[u8]) -> Result<AttestedMessage, DeviceError> {
        let msg = self.kernel.attest(session, payload)?;
        self.charge(self.attest_delay);
        self.diagnostics.attested += 1;
        self.last_sent.insert(session, msg.clone());
        Ok(msg)
    }

    /// Hands an already attested message to the transport, addressed to `to`.
    pub fn transmit(&mut self, to: DeviceId, msg: &AttestedMessage) -> Result<(), DeviceError> {
        if !self.transport.is_reachable(to) {
            return Err(DeviceError::UnknownPeer(to));
        }
        self.transport.submit(Outgoing {
            from: self.device,
            to,
            ready_at: self.clock,
            frame: msg.clone().into(),
        })
    }

    /// Attests and transmits to the session's peer.
    pub fn auth_send(&mut self, session: SessionId, payload: &[u8]) -> Result<AttestedMessage, DeviceError> {
        let to = self
            .peer(session)
            .ok_or(KernelError::UnknownSession(session))?;
        let msg = self.local_send(session, payload)?;
        self.transmit(to, &msg)?;
        Ok(msg)
    }

    /// Verifies `msg` under the key of `session` against this endpoint's
    /// designated local-verification counter for that session.
    pub fn local_verify(&mut self, session: SessionId, msg: &AttestedMessage) -> Result<AttestedMessage, DeviceError> {
        self.charge(self.verify_delay);
        self.kernel.verify_tag(session, msg)?;
        let expected = self.local_verify_cnt.entry(session).or_insert(0);
        if msg.counter != *expected {
            return Err(KernelError::CounterMismatch {
                session,
                expected: *expected,
                found: msg.counter,
            }
            .into());
        }
        *expected += 1;
        self.diagnostics.local_verified += 1;
        Ok(msg.clone())
    }

    /// Tag-only check under the key of `session`; no counter moves.
    pub fn verify_tag(&mut self, session: SessionId, msg: &AttestedMessage) -> Result<(), DeviceError> {
        self.charge(self.verify_delay);
        self.kernel.verify_tag(session, msg)?;
        Ok(())
    }

    /// Network receive path: decode, verify, enqueue.
    pub fn ingest_bytes(&mut self, bytes: &[u8]) -> Result<(), DeviceError> {
        match WireFrame::decode_bounded(bytes, self.kernel.max_payload()) {
            Ok(frame) => self.ingest(frame),
            Err(e) => {
                let err = DeviceError::Codec(e);
                self.diagnostics.record(None, None, &err);
                Err(err)
            }
        }
    }

    pub fn ingest(&mut self, frame: WireFrame) -> Result<(), DeviceError> {
        let msg: AttestedMessage = frame.into();
        let (session, counter) = (msg.session, msg.counter);
        let result = self.accept(msg);
        if let Err(e) = &result {
            self.diagnostics.record(Some(session), Some(counter), e);
        }
        result
    }

    fn accept(&mut self, msg: AttestedMessage) -> Result<(), DeviceError> {
        let expected = self
            .peer(msg.session)
            .ok_or(KernelError::UnknownSession(msg.session))?;
        self.charge(self.verify_delay);
        if msg.device != expected {
            return Err(DeviceError::WrongDevice {
                session: msg.session,
                expected,
                found: msg.device,
            });
        }
        self.kernel.verify(&msg)?;
        self.diagnostics.accepted += 1;
        self.arrival_seq += 1;
        self.inbox_len += 1;
        if self.inbox_len > self.inbox_soft_cap {
            self.diagnostics.inbox_over_cap += 1;
        }
        self.inbox
            .entry(msg.session)
            .or_default()
            .push_back((self.arrival_seq, msg));
        Ok(())
    }

    /// Removes and returns up to `max` verified messages of `session`.
    pub fn poll(&mut self, session: SessionId, max: usize) -> Vec<AttestedMessage> {
        let Some(q) = self.inbox.get_mut(&session) else {
            return Vec::new();
        };
        let n = max.min(q.len());
        self.inbox_len -= n;
        q.drain(..n).map(|(_, m)| m).collect()
    }

    /// Removes every verified message, across sessions, in arrival order.
    pub fn poll_all(&mut self) -> Vec<AttestedMessage> {
        let mut all: Vec<(u64, AttestedMessage)> = self
            .inbox
            .values_mut()
            .flat_map(|q| q.drain(..))
            .collect();
        all.sort_by_key(|(seq, _)| *seq);
        self.inbox_len = 0;
        all.into_iter().map(|(_, m)| m).collect()
    }

    pub fn pending(&self) -> usize {
        self.inbox_len
    }
}

/// Application-level batching: `k` records packed into one payload behind a
/// 4-byte big-endian record count; each record carries a 4-byte length.
pub mod batch {
    #[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
    #[error("malformed batch payload")]
    pub struct MalformedBatch;

    pub fn pack<R: AsRef<[u8]>>(records: &[R]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(records.len() as u32).to_be_bytes());
        for r in records {
            let r = r.as_ref();
            out.extend_from_slice(&(r.len() as u32).to_be_bytes());
            out.extend_from_slice(r);
        }
        out
    }

    pub fn unpack(bytes: &[u8]) -> Result<Vec<Vec<u8>>, MalformedBatch> {
        let mut rest = bytes;
        let mut take = |n: usize| -> Result<&[u8], MalformedBatch> {
            if rest.len() < n {
                return Err(MalformedBatch);
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let count = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
            records.push(take(len)?.to_vec());
        }
        if !rest.is_empty() {
            return Err(MalformedBatch);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SessionKey;

    fn net() -> (NetHandle, mpsc::Receiver<Outgoing>) {
        let (tx, rx) = mpsc::channel();
        (NetHandle::new(tx, [DeviceId(1), DeviceId(2), DeviceId(3)]), rx)
    }

    fn key() -> SessionKey {
        SessionKey::new([9; 32])
    }

    fn pair(net: &NetHandle) -> (Endpoint, Endpoint) {
        let a = Endpoint::connect(
            DeviceConfig::new(DeviceId(1)).with_session(SessionId(1), DeviceId(2), key()),
            net,
        )
        .unwrap();
        let b = Endpoint::connect(
            DeviceConfig::new(DeviceId(2)).with_session(SessionId(1), DeviceId(1), key()),
            net,
        )
        .unwrap();
        (a, b)
    }

    #[test]
    fn auth_send_then_poll() {
        let (h, rx) = net();
        let (mut a, mut b) = pair(&h);
        a.auth_send(SessionId(1), b"ping").unwrap();
        let out = rx.try_recv().unwrap();
        assert_eq!(out.to, DeviceId(2));
        b.ingest(out.frame).unwrap();
        let got = b.poll(SessionId(1), 10);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].counter, 0);
        assert_eq!(got[0].payload, b"ping");
    }

    #[test]
    fn duplicate_session_ids_rejected() {
        let (h, _rx) = net();
        let cfg = DeviceConfig::new(DeviceId(1))
            .with_session(SessionId(4), DeviceId(2), key())
            .with_session(SessionId(4), DeviceId(3), key());
        assert_eq!(
            Endpoint::connect(cfg, &h).unwrap_err(),
            DeviceError::Kernel(KernelError::DuplicateSession(SessionId(4)))
        );
    }

    #[test]
    fn unreachable_peer_rejected() {
        let (h, _rx) = net();
        let cfg = DeviceConfig::new(DeviceId(1)).with_session(SessionId(4), DeviceId(99), key());
        assert_eq!(Endpoint::connect(cfg, &h).unwrap_err(), DeviceError::UnknownPeer(DeviceId(99)));
    }

    #[test]
    fn sessions_have_independent_counters() {
        let (h, _rx) = net();
        let cfg = DeviceConfig::new(DeviceId(1))
            .with_session(SessionId(1), DeviceId(2), key())
            .with_session(SessionId(2), DeviceId(2), key())
            .with_session(SessionId(3), DeviceId(3), key());
        let mut a = Endpoint::connect(cfg, &h).unwrap();
        for _ in 0..3 {
            a.auth_send(SessionId(1), b"x").unwrap();
        }
        assert_eq!(a.auth_send(SessionId(2), b"x").unwrap().counter, 0);
        assert_eq!(a.auth_send(SessionId(3), b"x").unwrap().counter, 0);
        assert_eq!(a.auth_send(SessionId(1), b"x").unwrap().counter, 3);
    }

    #[test]
    fn local_send_multicast_yields_identical_triples() {
        let (h, _rx) = net();
        let leader = DeviceConfig::new(DeviceId(1)).with_session(SessionId(9), DeviceId(1), key());
        let mut l = Endpoint::connect(leader, &h).unwrap();
        let mut followers: Vec<Endpoint> = [2, 3]
            .into_iter()
            .map(|d| {
                Endpoint::connect(
                    DeviceConfig::new(DeviceId(d)).with_session(SessionId(9), DeviceId(1), key()),
                    &h,
                )
                .unwrap()
            })
            .collect();
        let m = l.local_send(SessionId(9), b"op").unwrap();
        for f in &mut followers {
            f.ingest(m.clone().into()).unwrap();
            let got = f.poll(SessionId(9), 1);
            assert_eq!(got[0].identity(), (DeviceId(1), SessionId(9), 0));
        }
        assert_eq!(l.local_send(SessionId(9), b"op2").unwrap().counter, 1);
    }

    #[test]
    fn local_verify_uses_its_own_stream() {
        let (h, _rx) = net();
        let (mut a, mut b) = pair(&h);
        let m0 = a.local_send(SessionId(1), b"0").unwrap();
        let m1 = a.local_send(SessionId(1), b"1").unwrap();
        b.local_verify(SessionId(1), &m0).unwrap();
        assert!(b.local_verify(SessionId(1), &m0).is_err());
        let mut bad = m1.clone();
        bad.payload[0] ^= 0x80;
        assert!(matches!(
            b.local_verify(SessionId(1), &bad),
            Err(DeviceError::Kernel(KernelError::AuthFailure { .. }))
        ));
        b.local_verify(SessionId(1), &m1).unwrap();
        // receive stream untouched
        assert_eq!(b.kernel().session(SessionId(1)).unwrap().recv_count(), 0);
    }

    #[test]
    fn poll_is_fifo_and_bounded() {
        let (h, rx) = net();
        let (mut a, mut b) = pair(&h);
        for i in 0..5u8 {
            a.auth_send(SessionId(1), &[i]).unwrap();
        }
        for out in rx.try_iter() {
            b.ingest(out.frame).unwrap();
        }
        assert!(b.poll(SessionId(2), 3).is_empty());
        let first: Vec<u64> = b.poll(SessionId(1), 3).iter().map(|m| m.counter).collect();
        assert_eq!(first, vec![0, 1, 2]);
        let rest: Vec<u64> = b.poll(SessionId(1), 3).iter().map(|m| m.counter).collect();
        assert_eq!(rest, vec![3, 4]);
        assert!(b.poll(SessionId(1), 3).is_empty());
    }

    #[test]
    fn tampered_frame_never_polled_and_counted() {
        let (h, rx) = net();
        let (mut a, mut b) = pair(&h);
        a.auth_send(SessionId(1), b"data").unwrap();
        let mut frame = rx.try_recv().unwrap().frame;
        frame.payload[1] ^= 4;
        assert!(b.ingest(frame).is_err());
        assert!(b.poll(SessionId(1), 10).is_empty());
        assert_eq!(b.diagnostics().rejections(RejectKind::AuthFailure), 1);
    }

    #[test]
    fn frame_from_wrong_device_rejected() {
        let (h, _rx) = net();
        let (_, mut b) = pair(&h);
        let mut impostor = Endpoint::connect(
            DeviceConfig::new(DeviceId(3)).with_session(SessionId(1), DeviceId(2), key()),
            &h,
        )
        .unwrap();
        let m = impostor.local_send(SessionId(1), b"x").unwrap();
        assert!(matches!(b.ingest(m.into()), Err(DeviceError::WrongDevice { .. })));
        assert_eq!(b.diagnostics().rejections(RejectKind::WrongDevice), 1);
    }

    #[test]
    fn simulated_delay_accounting() {
        let (h, _rx) = net();
        let cfg = DeviceConfig::new(DeviceId(1))
            .with_session(SessionId(1), DeviceId(2), key())
            .with_delay(TNIC_DELAY);
        let mut a = Endpoint::connect(cfg, &h).unwrap();
        for _ in 0..10 {
            a.auth_send(SessionId(1), b"x").unwrap();
        }
        assert!(a.clock() >= 10 * 23_000);
    }

    #[test]
    fn provisioning_freezes_identity() {
        let (h, _rx) = net();
        let mut a = Endpoint::connect(DeviceConfig::new(DeviceId(1)), &h).unwrap();
        let spec = SessionSpec {
            session: SessionId(1),
            peer: DeviceId(2),
            key: key(),
        };
        a.install_provisioned(vec![spec.clone()], [1; 48]).unwrap();
        assert!(a.is_frozen());
        assert_eq!(a.install_provisioned(vec![spec], [1; 48]), Err(DeviceError::IdentityFrozen));
    }

    #[test]
    fn transport_closed_surfaces() {
        let (h, rx) = net();
        let (mut a, _) = pair(&h);
        drop(rx);
        assert_eq!(a.auth_send(SessionId(1), b"x").unwrap_err(), DeviceError::TransportClosed);
    }

    #[test]
    fn batch_round_trip_and_malformed() {
        let recs = vec![b"a".to_vec(), vec![], b"ccc".to_vec()];
        let packed = batch::pack(&recs);
        assert_eq!(&packed[..4], &[0, 0, 0, 3]);
        assert_eq!(batch::unpack(&packed).unwrap(), recs);
        assert!(batch::unpack(&packed[..packed.len() - 1]).is_err());
        assert!(batch::unpack(&[0, 0, 0, 1]).is_err());
    }
}
