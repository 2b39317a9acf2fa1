//! Byte framing shared by every channel.
//!
//! Wire layout (multi-byte fields big-endian):
//!
//! ```text
//! +------+--------+------+---------+-----------------+--------+
//! | 0x7E | length | kind | seq (4) | payload (len B) | crc16  |
//! +------+--------+------+---------+-----------------+--------+
//! ```
//!
//! The CRC-16/CCITT-FALSE checksum covers `length` through the payload.

use thiserror::Error;

pub const SYNC: u8 = 0x7E;
pub const MAX_PAYLOAD: usize = 255;
/// Sync, length, kind, seq and crc.
pub const OVERHEAD: usize = 1 + 1 + 1 + 4 + 2;

const CRC16: crc::Crc<u16> = crc::Crc::<u16>::new(&crc::CRC_16_IBM_3740);

/// CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF).
pub fn crc16(bytes: &[u8]) -> u16 {
    CRC16.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad sync byte 0x{0:02x}")]
    BadSync(u8),
    #[error("truncated frame: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("crc mismatch: computed 0x{computed:04x}, frame carries 0x{carried:04x}")]
    BadCrc { computed: u16, carried: u16 },
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLong(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameKind {
    Log = 1,
    Ack = 2,
    OtaChunk = 3,
    OtaAck = 4,
    Request = 5,
    Reply = 6,
}

impl FrameKind {
    pub const ALL: [FrameKind; 6] = [
        FrameKind::Log,
        FrameKind::Ack,
        FrameKind::OtaChunk,
        FrameKind::OtaAck,
        FrameKind::Request,
        FrameKind::Reply,
    ];

    fn from_byte(b: u8) -> Result<Self, FrameError> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == b)
            .ok_or(FrameError::UnknownKind(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, seq: u32, payload: Vec<u8>) -> Result<Self, FrameError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        Ok(Self { kind, seq, payload })
    }

    pub fn ack(seq: u32) -> Self {
        Self {
            kind: FrameKind::Ack,
            seq,
            payload: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLong(self.payload.len()));
        }
        Ok(())
    }

    pub fn wire_len(&self) -> usize {
        OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(SYNC);
        out.push(self.payload.len() as u8);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc16(&out[1..]);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let (frame, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FrameError::TrailingBytes(bytes.len() - used));
        }
        Ok(frame)
    }

    /// Decodes one frame from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), FrameError> {
        let Some(&sync) = bytes.first() else {
            return Err(FrameError::Truncated {
                needed: OVERHEAD,
                got: 0,
            });
        };
        if sync != SYNC {
            return Err(FrameError::BadSync(sync));
        }
        if bytes.len() < 2 {
            return Err(FrameError::Truncated {
                needed: OVERHEAD,
                got: bytes.len(),
            });
        }
        let len = bytes[1] as usize;
        let total = OVERHEAD + len;
        if bytes.len() < total {
            return Err(FrameError::Truncated {
                needed: total,
                got: bytes.len(),
            });
        }
        let body = &bytes[1..total - 2];
        let carried = u16::from_be_bytes([bytes[total - 2], bytes[total - 1]]);
        let computed = crc16(body);
        if computed != carried {
            return Err(FrameError::BadCrc { computed, carried });
        }
        let kind = FrameKind::from_byte(bytes[2])?;
        let seq = u32::from_be_bytes([bytes[3], bytes[4], bytes[5], bytes[6]]);
        let payload = bytes[7..7 + len].to_vec();
        Ok((Self { kind, seq, payload }, total))
    }
}
