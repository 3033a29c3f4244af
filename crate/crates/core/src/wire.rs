//! Wire frame codec.
//!
//! ```text
//! offset  size  field
//!      0     4  session      (u32, big-endian)
//!      4     4  device       (u32, big-endian)
//!      8     8  counter      (u64, big-endian)
//!     16     4  payload_len  (u32, big-endian)
//!     20     n  payload
//!   20+n    64  tag
//! ```

use crate::kernel::{AttestationTag, AttestedMessage, DeviceId, SessionId, TAG_LEN};

pub const HEADER_LEN: usize = 20;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("declared payload of {len} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { len: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub session: SessionId,
    pub device: DeviceId,
    pub counter: u64,
    pub payload: Vec<u8>,
    pub tag: AttestationTag,
}

impl WireFrame {
    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.session.0.to_be_bytes());
        out.extend_from_slice(&self.device.0.to_be_bytes());
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(self.tag.as_bytes());
        out
    }

    /// Decodes exactly one frame; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        Self::decode_bounded(bytes, u32::MAX as usize)
    }

    pub fn decode_bounded(bytes: &[u8], max_payload: usize) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
        let len = u32_at(16) as usize;
        if len > max_payload {
            return Err(CodecError::PayloadTooLarge { len, max: max_payload });
        }
        let total = FRAME_OVERHEAD + len;
        if bytes.len() < total {
            return Err(CodecError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(CodecError::TrailingBytes(bytes.len() - total));
        }
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[HEADER_LEN + len..total]);
        Ok(Self {
            session: SessionId(u32_at(0)),
            device: DeviceId(u32_at(4)),
            counter: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
            payload: bytes[HEADER_LEN..HEADER_LEN + len].to_vec(),
            tag: AttestationTag::from_bytes(tag),
        })
    }
}

impl From<AttestedMessage> for WireFrame {
    fn from(m: AttestedMessage) -> Self {
        Self {
            session: m.session,
            device: m.device,
            counter: m.counter,
            payload: m.payload,
            tag: m.tag,
        }
    }
}

impl From<WireFrame> for AttestedMessage {
    fn from(f: WireFrame) -> Self {
        Self {
            tag: f.tag,
            payload: f.payload,
            device: f.device,
            session: f.session,
            counter: f.counter,
        }
    }
}

impl AttestedMessage {
    pub fn encode(&self) -> Vec<u8> {
        WireFrame::from(self.clone()).encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        WireFrame::decode(bytes).map(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(payload: Vec<u8>, tag: [u8; TAG_LEN]) -> WireFrame {
        WireFrame {
            session: SessionId(0xA1B2_C3D4),
            device: DeviceId(5),
            counter: 0x0102_0304_0506_0708,
            payload,
            tag: AttestationTag::from_bytes(tag),
        }
    }

    #[test]
    fn layout_is_big_endian_fixed_width() {
        let f = frame(b"hi".to_vec(), [0xEE; TAG_LEN]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), 84 + 2);
        assert_eq!(&bytes[..4], &[0xA1, 0xB2, 0xC3, 0xD4]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 5]);
        assert_eq!(&bytes[8..16], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&bytes[16..20], &[0, 0, 0, 2]);
        assert_eq!(&bytes[20..22], b"hi");
        assert!(bytes[22..].iter().all(|b| *b == 0xEE));
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let bytes = frame(b"abc".to_vec(), [1; TAG_LEN]).encode();
        assert!(matches!(
            WireFrame::decode(&bytes[..10]),
            Err(CodecError::Truncated { needed: 20, have: 10 })
        ));
        assert!(matches!(
            WireFrame::decode(&bytes[..bytes.len() - 1]),
            Err(CodecError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(WireFrame::decode(&long), Err(CodecError::TrailingBytes(1)));
    }

    #[test]
    fn oversized_declared_length_rejected_before_allocation() {
        let mut bytes = frame(vec![], [0; TAG_LEN]).encode();
        bytes[16..20].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(matches!(
            WireFrame::decode_bounded(&bytes, 1024),
            Err(CodecError::PayloadTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            session in any::<u32>(),
            device in any::<u32>(),
            counter in any::<u64>(),
            payload in proptest::collection::vec(any::<u8>(), 0..512),
            tag in proptest::collection::vec(any::<u8>(), TAG_LEN),
        ) {
            let f = WireFrame {
                session: SessionId(session),
                device: DeviceId(device),
                counter,
                payload,
                tag: AttestationTag::from_bytes(tag.try_into().unwrap()),
            };
            let bytes = f.encode();
            prop_assert_eq!(bytes.len(), FRAME_OVERHEAD + f.payload.len());
            prop_assert_eq!(WireFrame::decode(&bytes).unwrap(), f);
        }
    }
}
