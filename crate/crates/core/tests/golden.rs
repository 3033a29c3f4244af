//! Frozen byte-level fixtures.

use tnic::kernel::{compute_tag, DeviceId, Kernel, SessionId, SessionKey};
use tnic::remote_attestation::demo;
use tnic::wire::WireFrame;

const FRAMES: &str = include_str!("fixtures/golden_frames.txt");
const DEMO_SEED7: &str = include_str!("fixtures/attest_demo_seed7.txt");

fn key() -> SessionKey {
    let mut k = [0u8; 32];
    for (i, b) in k.iter_mut().enumerate() {
        *b = i as u8;
    }
    SessionKey::new(k)
}

fn golden() -> Vec<(Vec<u8>, Vec<u8>)> {
    FRAMES
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let (p, f) = l.split_once(' ').unwrap();
            (hex::decode(p).unwrap(), hex::decode(f).unwrap())
        })
        .collect()
}

#[test]
fn attested_frames_match_reference_hmac() {
    let mut k = Kernel::new(DeviceId(7));
    k.provision_session(SessionId(9), key()).unwrap();
    for (payload, frame) in golden() {
        let msg = k.attest(SessionId(9), &payload).unwrap();
        assert_eq!(WireFrame::from(msg).encode(), frame);
    }
}

#[test]
fn reference_frames_verify_in_order_and_not_twice() {
    let mut rx = Kernel::new(DeviceId(8));
    rx.provision_session(SessionId(9), key()).unwrap();
    let frames = golden();
    for (_, bytes) in &frames {
        rx.verify(&WireFrame::decode(bytes).unwrap().into()).unwrap();
    }
    assert!(rx.verify(&WireFrame::decode(&frames[0].1).unwrap().into()).is_err());
}

#[test]
fn tag_covers_device_id() {
    let a = compute_tag(&key(), b"x", DeviceId(7), 0);
    let b = compute_tag(&key(), b"x", DeviceId(8), 0);
    assert_ne!(a, b);
}

#[test]
fn attest_demo_transcript_is_frozen() {
    assert_eq!(demo(7, 2).unwrap().render(), DEMO_SEED7);
}
