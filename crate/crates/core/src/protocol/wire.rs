use std::fmt;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SPES";
pub const VERSION: u8 = 1;
/// magic(4) + version(1) + kind(1) + round(4) + payload_len(8)
pub const HEADER_LEN: usize = 18;
/// Refuse payloads above this size before allocating.
pub const MAX_PAYLOAD: u64 = 1 << 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    Assign = 2,
    GlobalModel = 3,
    LocalUpdate = 4,
    MergeApplied = 5,
    RoundDone = 6,
    Bye = 7,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MessageKind::Hello,
            2 => MessageKind::Assign,
            3 => MessageKind::GlobalModel,
            4 => MessageKind::LocalUpdate,
            5 => MessageKind::MergeApplied,
            6 => MessageKind::RoundDone,
            7 => MessageKind::Bye,
            _ => return None,
        })
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MessageKind::Hello => "HELLO",
            MessageKind::Assign => "ASSIGN",
            MessageKind::GlobalModel => "GLOBAL_MODEL",
            MessageKind::LocalUpdate => "LOCAL_UPDATE",
            MessageKind::MergeApplied => "MERGE_APPLIED",
            MessageKind::RoundDone => "ROUND_DONE",
            MessageKind::Bye => "BYE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{0} trailing bytes after payload")]
    Trailing(u64),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: MessageKind,
    pub round: u32,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                needed: HEADER_LEN as u64,
                available: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(WireError::Version(bytes[4]));
        }
        let kind = MessageKind::from_u8(bytes[5]).ok_or(WireError::UnknownKind(bytes[5]))?;
        let round = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        let payload_len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(payload_len));
        }
        Ok(Self {
            kind,
            round,
            payload_len,
        })
    }
}

/// One framed message: header fields plus opaque payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(kind: MessageKind, round: u32, payload: Vec<u8>) -> Self {
        Self {
            kind,
            round,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame; extra bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let h = FrameHeader::decode(bytes)?;
        let available = (bytes.len() - HEADER_LEN) as u64;
        if available < h.payload_len {
            return Err(WireError::Truncated {
                needed: h.payload_len,
                available,
            });
        }
        if available > h.payload_len {
            return Err(WireError::Trailing(available - h.payload_len));
        }
        Ok(Self {
            kind: h.kind,
            round: h.round,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}
