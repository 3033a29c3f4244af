//! TCP transport for one point-to-point link.
//!
//! Framing is a 4-byte big-endian length followed by one encoded
//! [`WireFrame`]. A writer thread drains the endpoint's [`NetHandle`]; a
//! reader thread decodes inbound frames into a channel the application pumps
//! into its endpoint with [`SocketBridge::recv_into`]. Anything that fails to
//! decode closes the connection and never touches kernel state.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::device::{DeviceError, Endpoint, NetHandle, Outgoing};
use crate::kernel::{DeviceId, DEFAULT_MAX_PAYLOAD};
use crate::wire::{CodecError, WireFrame, FRAME_OVERHEAD};

pub const MAX_FRAME_BYTES: usize = FRAME_OVERHEAD + DEFAULT_MAX_PAYLOAD;

#[derive(Debug, thiserror::Error)]
pub enum SocketError {
    #[error("socket I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    Codec(#[from] CodecError),
    #[error("length prefix of {0} bytes exceeds the frame limit")]
    Oversized(usize),
    #[error("connection closed")]
    Closed,
}

pub fn write_frame<W: Write>(w: &mut W, frame: &WireFrame) -> io::Result<()> {
    let bytes = frame.encode();
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()
}

/// Reads one length-prefixed frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R, max_payload: usize) -> Result<Option<WireFrame>, SocketError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > FRAME_OVERHEAD + max_payload {
        return Err(SocketError::Oversized(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(WireFrame::decode_bounded(&buf, max_payload)?))
}

pub struct SocketBridge {
    stream: TcpStream,
    incoming: mpsc::Receiver<Result<WireFrame, SocketError>>,
    reader: Option<JoinHandle<()>>,
    writer: Option<JoinHandle<()>>,
}

impl SocketBridge {
    pub fn connect(addr: impl ToSocketAddrs, remote: DeviceId) -> Result<(Self, NetHandle), SocketError> {
        Self::from_stream(TcpStream::connect(addr)?, remote)
    }

    /// Wraps an established stream. The returned handle reaches `remote` only.
    pub fn from_stream(stream: TcpStream, remote: DeviceId) -> Result<(Self, NetHandle), SocketError> {
        stream.set_nodelay(true)?;
        let (out_tx, out_rx) = mpsc::channel::<Outgoing>();
        let (in_tx, in_rx) = mpsc::channel();

        let mut w = stream.try_clone()?;
        let writer = std::thread::spawn(move || {
            for out in out_rx {
                if write_frame(&mut w, &out.frame).is_err() {
                    break;
                }
            }
        });

        let mut r = stream.try_clone()?;
        let reader = std::thread::spawn(move || loop {
            match read_frame(&mut r, DEFAULT_MAX_PAYLOAD) {
                Ok(Some(f)) => {
                    if in_tx.send(Ok(f)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = r.shutdown(Shutdown::Both);
                    let _ = in_tx.send(Err(e));
                    break;
                }
            }
        });

        let bridge = Self {
            stream,
            incoming: in_rx,
            reader: Some(reader),
            writer: Some(writer),
        };
        Ok((bridge, NetHandle::new(out_tx, [remote])))
    }

    /// Waits up to `timeout` for one frame and feeds it to `ep`.
    ///
    /// The outer error is a transport failure; the inner result is the
    /// endpoint's verdict on a well-formed frame.
    pub fn recv_into(
        &self,
        ep: &mut Endpoint,
        timeout: Duration,
    ) -> Result<Option<Result<(), DeviceError>>, SocketError> {
        match self.incoming.recv_timeout(timeout) {
            Ok(Ok(frame)) => Ok(Some(ep.ingest(frame))),
            Ok(Err(e)) => Err(e),
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(SocketError::Closed),
        }
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
        // the writer exits once every NetHandle clone is dropped
        drop(self.writer.take());
    }
}

impl Drop for SocketBridge {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AttestationTag, SessionId, TAG_LEN};

    #[test]
    fn length_prefixed_round_trip_in_memory() {
        let f = WireFrame {
            session: SessionId(1),
            device: DeviceId(2),
            counter: 3,
            payload: b"abc".to_vec(),
            tag: AttestationTag::from_bytes([7; TAG_LEN]),
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        assert_eq!(&buf[..4], &(87u32).to_be_bytes());
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur, 1024).unwrap(), Some(f));
        assert_eq!(read_frame(&mut cur, 1024).unwrap(), None);
    }

    #[test]
    fn oversized_prefix_refused() {
        let mut cur = io::Cursor::new(u32::MAX.to_be_bytes().to_vec());
        assert!(matches!(read_frame(&mut cur, 1024), Err(SocketError::Oversized(_))));
    }
}
