//! Generic wrapper that hardens a crash-tolerant protocol against Byzantine
//! peers.
//!
//! Every outgoing application message piggybacks a hash of the sender's
//! state and an echo of the last message the sender verified from the
//! receiver. The receiver then runs four checks in order:
//!
//! 1. kernel verification (already done when the frame reaches `poll`)
//! 2. the state hash matches a shadow copy of the sender's state machine
//!    advanced by the same message
//! 3. the echo carries a valid tag from this very device
//! 4. the echo is this device's latest message to the sender
//!
//! Envelope layout, big-endian:
//!
//! ```text
//! app_len u32 | app | state_hash[48] | echo_flag u8 | [frame_len u32 | frame]
//! ```

use sha2::{Digest, Sha384};

use crate::device::{DeviceError, Endpoint};
use crate::kernel::{AttestedMessage, SessionId};
use crate::wire::WireFrame;

pub const STATE_HASH_LEN: usize = 48;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransformError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("malformed envelope")]
    Malformed,
    #[error("sender state diverges from its deterministic state machine at counter {counter}")]
    SenderStateMismatch { counter: u64 },
    #[error("echoed message was not attested by this device")]
    EchoForged,
    #[error("sender's view of this device is not its latest message")]
    ViewLag,
    #[error("non-deterministic state machines cannot be transformed")]
    NonDeterministic,
}

/// A deterministic application state machine.
pub trait StateMachine: Clone {
    fn apply(&mut self, input: &[u8]) -> Vec<u8>;
    fn serialize_state(&self) -> Vec<u8>;
    fn is_deterministic(&self) -> bool {
        true
    }
}

pub fn state_hash(serialized: &[u8]) -> [u8; STATE_HASH_LEN] {
    Sha384::digest(serialized).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformEnvelope {
    pub app_msg: Vec<u8>,
    pub sender_state_hash: [u8; STATE_HASH_LEN],
    pub receiver_echo: Option<AttestedMessage>,
}

impl TransformEnvelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.app_msg.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.app_msg);
        out.extend_from_slice(&self.sender_state_hash);
        match &self.receiver_echo {
            None => out.push(0),
            Some(m) => {
                let frame = m.encode();
                out.push(1);
                out.extend_from_slice(&(frame.len() as u32).to_be_bytes());
                out.extend_from_slice(&frame);
            }
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, TransformError> {
        let mut rest = b;
        let mut take = |n: usize| -> Result<&[u8], TransformError> {
            if rest.len() < n {
                return Err(TransformError::Malformed);
            }
            let (h, t) = rest.split_at(n);
            rest = t;
            Ok(h)
        };
        let n = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let app_msg = take(n)?.to_vec();
        let sender_state_hash = take(STATE_HASH_LEN)?.try_into().unwrap();
        let receiver_echo = match take(1)?[0] {
            0 => None,
            1 => {
                let n = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
                Some(WireFrame::decode(take(n)?).map_err(|_| TransformError::Malformed)?.into())
            }
            _ => return Err(TransformError::Malformed),
        };
        if !rest.is_empty() {
            return Err(TransformError::Malformed);
        }
        Ok(Self {
            app_msg,
            sender_state_hash,
            receiver_echo,
        })
    }
}

/// Shadow copy of a peer's state machine.
#[derive(Debug, Clone)]
pub struct StateSimulator<M> {
    shadow: M,
}

impl<M: StateMachine> StateSimulator<M> {
    pub fn new(initial: M) -> Result<Self, TransformError> {
        if !initial.is_deterministic() {
            return Err(TransformError::NonDeterministic);
        }
        Ok(Self { shadow: initial })
    }

    pub fn shadow(&self) -> &M {
        &self.shadow
    }
}

/// Builds the envelope around `app_msg` and sends it on `session`.
///
/// `my_state` is the sender's serialized state after processing `app_msg`;
/// `receiver_echo` is the last message verified from the receiver.
pub fn wrapped_send(
    ep: &mut Endpoint,
    session: SessionId,
    app_msg: &[u8],
    my_state: &[u8],
    receiver_echo: Option<&AttestedMessage>,
) -> Result<AttestedMessage, TransformError> {
    let env = TransformEnvelope {
        app_msg: app_msg.to_vec(),
        sender_state_hash: state_hash(my_state),
        receiver_echo: receiver_echo.cloned(),
    };
    Ok(ep.auth_send(session, &env.encode())?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub app_msg: Vec<u8>,
    /// The attested carrier, to be echoed back to the sender.
    pub msg: AttestedMessage,
}

/// Takes the next verified message on `inbound` and runs checks 2 to 4.
///
/// `outbound` is this device's session towards the same peer. The shadow
/// only advances when every check passes.
pub fn wrapped_recv<M: StateMachine>(
    ep: &mut Endpoint,
    inbound: SessionId,
    outbound: SessionId,
    sim: &mut StateSimulator<M>,
) -> Result<Option<Received>, TransformError> {
    let Some(msg) = ep.poll(inbound, 1).pop() else {
        return Ok(None);
    };
    let env = TransformEnvelope::decode(&msg.payload)?;

    let mut next = sim.shadow.clone();
    next.apply(&env.app_msg);
    if state_hash(&next.serialize_state()) != env.sender_state_hash {
        return Err(TransformError::SenderStateMismatch { counter: msg.counter });
    }

    if let Some(echo) = &env.receiver_echo {
        if echo.device != ep.device() || echo.session != outbound || ep.verify_tag(outbound, echo).is_err() {
            return Err(TransformError::EchoForged);
        }
    }
    if env.receiver_echo.as_ref() != ep.last_sent(outbound) {
        return Err(TransformError::ViewLag);
    }

    sim.shadow = next;
    Ok(Some(Received {
        app_msg: env.app_msg,
        msg,
    }))
}

/// Reference state machine: a counter that adds big-endian u64 deltas.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counter {
    pub value: u64,
}

impl StateMachine for Counter {
    fn apply(&mut self, input: &[u8]) -> Vec<u8> {
        let delta = input
            .get(..8)
            .map_or(1, |b| u64::from_be_bytes(b.try_into().unwrap()));
        self.value = self.value.wrapping_add(delta);
        self.value.to_be_bytes().to_vec()
    }

    fn serialize_state(&self) -> Vec<u8> {
        self.value.to_be_bytes().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, NetHandle, Outgoing};
    use crate::kernel::{DeviceId, KernelError, SessionKey};
    use std::sync::mpsc;

    const AB: SessionId = SessionId(1);
    const BA: SessionId = SessionId(2);

    fn pair() -> (Endpoint, Endpoint, mpsc::Receiver<Outgoing>) {
        let (tx, rx) = mpsc::channel();
        let h = NetHandle::new(tx, [DeviceId(1), DeviceId(2)]);
        let k1 = SessionKey::new([1; 32]);
        let k2 = SessionKey::new([2; 32]);
        let a = DeviceConfig::new(DeviceId(1))
            .with_session(AB, DeviceId(2), k1.clone())
            .with_session(BA, DeviceId(2), k2.clone());
        let b = DeviceConfig::new(DeviceId(2))
            .with_session(AB, DeviceId(1), k1)
            .with_session(BA, DeviceId(1), k2);
        (Endpoint::connect(a, &h).unwrap(), Endpoint::connect(b, &h).unwrap(), rx)
    }

    fn deliver(rx: &mpsc::Receiver<Outgoing>, a: &mut Endpoint, b: &mut Endpoint) {
        for out in rx.try_iter() {
            let target = if out.to == a.device() { &mut *a } else { &mut *b };
            let _ = target.ingest(out.frame);
        }
    }

    fn delta(d: u64) -> Vec<u8> {
        d.to_be_bytes().to_vec()
    }

    #[test]
    fn envelope_round_trip() {
        let (mut a, _, _rx) = pair();
        let echo = a.local_send(AB, b"x").unwrap();
        for e in [None, Some(echo)] {
            let env = TransformEnvelope {
                app_msg: b"hello".to_vec(),
                sender_state_hash: [7; 48],
                receiver_echo: e,
            };
            assert_eq!(TransformEnvelope::decode(&env.encode()).unwrap(), env);
        }
        assert_eq!(TransformEnvelope::decode(&[0, 0]), Err(TransformError::Malformed));
    }

    #[test]
    fn state_hash_is_sensitive_and_deterministic() {
        assert_eq!(state_hash(b"abc"), state_hash(b"abc"));
        assert_ne!(state_hash(b"abc"), state_hash(b"abd"));
    }

    #[test]
    fn honest_ping_pong_keeps_shadows_exact() {
        let (mut a, mut b, rx) = pair();
        let (mut sa, mut sb) = (Counter::default(), Counter::default());
        let mut sim_of_a = StateSimulator::new(Counter::default()).unwrap();
        let mut sim_of_b = StateSimulator::new(Counter::default()).unwrap();
        let mut a_echo: Option<AttestedMessage> = None;
        for round in 1..=5u64 {
            sa.apply(&delta(round));
            wrapped_send(&mut a, AB, &delta(round), &sa.serialize_state(), a_echo.as_ref()).unwrap();
            deliver(&rx, &mut a, &mut b);
            let got = wrapped_recv(&mut b, AB, BA, &mut sim_of_a).unwrap().unwrap();
            assert_eq!(sim_of_a.shadow(), &sa);

            sb.apply(&delta(round * 10));
            wrapped_send(&mut b, BA, &delta(round * 10), &sb.serialize_state(), Some(&got.msg)).unwrap();
            deliver(&rx, &mut a, &mut b);
            let back = wrapped_recv(&mut a, BA, AB, &mut sim_of_b).unwrap().unwrap();
            assert_eq!(sim_of_b.shadow(), &sb);
            a_echo = Some(back.msg);
        }
        assert_eq!(sa.value, 15);
        assert_eq!(sb.value, 150);
    }

    #[test]
    fn off_by_one_sender_caught_at_first_bad_round() {
        let (mut a, mut b, rx) = pair();
        let mut real = Counter::default();
        let mut oracle = Counter::default();
        let mut sim = StateSimulator::new(Counter::default()).unwrap();
        for round in 0..6u64 {
            real.apply(&delta(1));
            if round == 3 {
                real.value += 1;
            }
            oracle.apply(&delta(1));
            wrapped_send(&mut a, AB, &delta(1), &real.serialize_state(), None).unwrap();
            deliver(&rx, &mut a, &mut b);
            let r = wrapped_recv(&mut b, AB, BA, &mut sim);
            if real == oracle {
                assert!(r.unwrap().is_some(), "round {round}");
            } else {
                assert_eq!(r, Err(TransformError::SenderStateMismatch { counter: 3 }));
                return;
            }
        }
        panic!("deviation not detected");
    }

    #[test]
    fn forged_echo_and_view_lag() {
        let (mut a, mut b, rx) = pair();
        let mut sim = StateSimulator::new(Counter::default()).unwrap();
        let mine = b.local_send(BA, b"b's message").unwrap();

        let mut forged = mine.clone();
        forged.payload[0] ^= 1;
        wrapped_send(&mut a, AB, &delta(1), &1u64.to_be_bytes(), Some(&forged)).unwrap();
        deliver(&rx, &mut a, &mut b);
        assert_eq!(wrapped_recv(&mut b, AB, BA, &mut sim), Err(TransformError::EchoForged));

        b.local_send(BA, b"newer").unwrap();
        wrapped_send(&mut a, AB, &delta(1), &1u64.to_be_bytes(), Some(&mine)).unwrap();
        deliver(&rx, &mut a, &mut b);
        assert_eq!(wrapped_recv(&mut b, AB, BA, &mut sim), Err(TransformError::ViewLag));
        assert_eq!(sim.shadow().value, 0);
    }

    #[test]
    fn stale_envelope_stopped_by_kernel() {
        let (mut a, mut b, rx) = pair();
        let mut sim = StateSimulator::new(Counter::default()).unwrap();
        wrapped_send(&mut a, AB, &delta(1), &1u64.to_be_bytes(), None).unwrap();
        let out = rx.try_recv().unwrap();
        b.ingest(out.frame.clone()).unwrap();
        wrapped_recv(&mut b, AB, BA, &mut sim).unwrap().unwrap();
        assert!(matches!(
            b.ingest(out.frame),
            Err(DeviceError::Kernel(KernelError::CounterMismatch { .. }))
        ));
        assert_eq!(wrapped_recv(&mut b, AB, BA, &mut sim), Ok(None));
    }

    #[derive(Clone)]
    struct Dice;
    impl StateMachine for Dice {
        fn apply(&mut self, _: &[u8]) -> Vec<u8> {
            vec![4]
        }
        fn serialize_state(&self) -> Vec<u8> {
            vec![]
        }
        fn is_deterministic(&self) -> bool {
            false
        }
    }

    #[test]
    fn non_deterministic_machine_refused() {
        assert!(matches!(StateSimulator::new(Dice), Err(TransformError::NonDeterministic)));
    }
}
