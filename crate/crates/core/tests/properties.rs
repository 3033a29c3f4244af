use proptest::prelude::*;

use tnic::device::batch;
use tnic::kernel::{DeviceId, Kernel, SessionId, SessionKey};
use tnic::log::{chain_digest, ZERO_DIGEST};
use tnic::protocols::a2m::{A2m, LogId};
use tnic::wire::WireFrame;

mod util {
    use std::sync::mpsc;
    use tnic::device::{DeviceConfig, Endpoint, NetHandle};
    use tnic::kernel::{DeviceId, SessionId, SessionKey};

    pub fn endpoint(sessions: &[u32]) -> Endpoint {
        let (tx, _rx) = mpsc::channel();
        let me = DeviceId(1);
        let mut cfg = DeviceConfig::new(me);
        for s in sessions {
            cfg = cfg.with_session(SessionId(*s), me, SessionKey::new([*s as u8; 32]));
        }
        Endpoint::connect(cfg, &NetHandle::new(tx, [])).unwrap()
    }
}

fn pair(key: [u8; 32]) -> (Kernel, Kernel) {
    let mut a = Kernel::new(DeviceId(1));
    let mut b = Kernel::new(DeviceId(2));
    a.provision_session(SessionId(1), SessionKey::new(key)).unwrap();
    b.provision_session(SessionId(1), SessionKey::new(key)).unwrap();
    (a, b)
}

proptest! {
    #[test]
    fn in_order_delivery_always_verifies(
        key in any::<[u8; 32]>(),
        payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 1..20),
    ) {
        let (mut a, mut b) = pair(key);
        for p in &payloads {
            let m = a.attest(SessionId(1), p).unwrap();
            prop_assert!(b.verify(&m).is_ok());
        }
    }

    #[test]
    fn any_bit_flip_is_rejected(
        key in any::<[u8; 32]>(),
        payload in prop::collection::vec(any::<u8>(), 0..48),
        bit in any::<prop::sample::Index>(),
    ) {
        let (mut a, mut b) = pair(key);
        let mut bytes = WireFrame::from(a.attest(SessionId(1), &payload).unwrap()).encode();
        let i = bit.index(bytes.len() * 8);
        bytes[i / 8] ^= 1 << (i % 8);
        let accepted = WireFrame::decode(&bytes).map(|f| b.verify(&f.into()).is_ok()).unwrap_or(false);
        prop_assert!(!accepted);
    }

    #[test]
    fn skipped_or_repeated_counters_are_rejected(skip in 1usize..5) {
        let (mut a, mut b) = pair([3; 32]);
        let msgs: Vec<_> = (0..=skip).map(|i| a.attest(SessionId(1), &[i as u8]).unwrap()).collect();
        prop_assert!(b.verify(&msgs[skip]).is_err());
        b.verify(&msgs[0]).unwrap();
        prop_assert!(b.verify(&msgs[0]).is_err());
    }

    #[test]
    fn batch_round_trips(records in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 0..17)) {
        prop_assert_eq!(batch::unpack(&batch::pack(&records)).unwrap(), records);
    }

    #[test]
    fn a2m_digests_recompute(ctxs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..24), 1..40)) {
        let mut ep = util::endpoint(&[100, 101]);
        let mut log = A2m::new(DeviceId(1), SessionId(100));
        log.create_log(LogId(1), SessionId(101)).unwrap();
        for c in &ctxs {
            log.append(&mut ep, LogId(1), c).unwrap();
        }
        let mut prev = ZERO_DIGEST;
        for (i, e) in log.log(LogId(1)).unwrap().entries().iter().enumerate() {
            prev = chain_digest(&ctxs[i], i as u64, &prev);
            prop_assert_eq!(e.cum_digest, prev);
        }
    }

    #[test]
    fn truncated_entries_fail_the_boundary(n in 2u64..30, cut in any::<prop::sample::Index>()) {
        let mut ep = util::endpoint(&[100, 101]);
        let mut log = A2m::new(DeviceId(1), SessionId(100));
        log.create_log(LogId(1), SessionId(101)).unwrap();
        for i in 0..n {
            log.append(&mut ep, LogId(1), &i.to_be_bytes()).unwrap();
        }
        let head = 1 + cut.index(n as usize - 1) as u64;
        log.truncate(&mut ep, LogId(1), head, 7).unwrap();
        let (h, t) = log.boundaries(LogId(1)).unwrap();
        prop_assert_eq!(h, head);
        for seq in 0..t {
            let e = log.lookup(LogId(1), seq).unwrap();
            let ok = log.verify_lookup(&mut ep, LogId(1), &e, h, t).is_ok();
            prop_assert_eq!(ok, seq >= head);
        }
    }
}
