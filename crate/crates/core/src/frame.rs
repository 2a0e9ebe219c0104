//! Length-prefixed message frames for the two-party session.
//!
//! Wire layout: payload length as u32 little-endian, one message-type byte,
//! then the payload. The length field does not include the type byte, so an
//! empty hello carrying protocol version 1 encodes as `01 00 00 00 01 01`.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAX_PAYLOAD_LEN: usize = 64 << 20;
const HEADER_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    EventTransfer = 2,
    SiftAnnounce = 3,
    Sample = 4,
    Parity = 5,
    Flip = 6,
    Verify = 7,
    PaSeed = 8,
    Done = 9,
    Error = 10,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::Hello,
        MsgType::EventTransfer,
        MsgType::SiftAnnounce,
        MsgType::Sample,
        MsgType::Parity,
        MsgType::Flip,
        MsgType::Verify,
        MsgType::PaSeed,
        MsgType::Done,
        MsgType::Error,
    ];
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(b: u8) -> Result<Self, FrameError> {
        MsgType::ALL
            .get(usize::from(b).wrapping_sub(1))
            .copied()
            .ok_or(FrameError::UnknownType(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame: {buffered} of {needed} bytes before end of stream")]
    TruncatedFrame { buffered: usize, needed: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame payload of {0} bytes exceeds the {MAX_PAYLOAD_LEN}-byte cap")]
    OversizeFrame(u64),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        FrameError::Io(e.to_string())
    }
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `bytes`, returning it with the
    /// number of bytes consumed, or `None` if more input is needed.
    pub fn decode(bytes: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        if len as usize > MAX_PAYLOAD_LEN {
            return Err(FrameError::OversizeFrame(u64::from(len)));
        }
        let msg_type = MsgType::try_from(bytes[4])?;
        let total = HEADER_LEN + len as usize;
        if bytes.len() < total {
            return Ok(None);
        }
        let frame = Frame::new(msg_type, bytes[HEADER_LEN..total].to_vec());
        Ok(Some((frame, total)))
    }
}

/// Incremental decoder for a byte stream delivered in arbitrary pieces.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        match Frame::decode(&self.buf)? {
            Some((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }

    /// Called at end of stream; leftover bytes are a truncated frame.
    pub fn finish(&self) -> Result<(), FrameError> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let needed = if self.buf.len() < HEADER_LEN {
            HEADER_LEN
        } else {
            HEADER_LEN + u32::from_le_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize
        };
        Err(FrameError::TruncatedFrame {
            buffered: self.buf.len(),
            needed,
        })
    }
}

/// Blocking frame reader over any byte stream.
pub struct FrameReader<R> {
    inner: R,
    decoder: FrameDecoder,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner,
            decoder: FrameDecoder::new(),
        }
    }

    /// Next frame, or `None` on a clean end of stream.
    pub fn read_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            if let Some(frame) = self.decoder.next_frame()? {
                return Ok(Some(frame));
            }
            let n = match self.inner.read(&mut chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                self.decoder.finish()?;
                return Ok(None);
            }
            self.decoder.push(&chunk[..n]);
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}
