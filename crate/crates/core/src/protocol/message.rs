use super::payload::{PayloadError, Reader, TensorBlockPayload};
use super::wire::{MessageKind, WireMessage};

pub type ConfigHash = [u8; 32];

/// Decoded protocol messages. The header round of messages without a round
/// of their own is zero.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        node: u32,
        config_hash: ConfigHash,
    },
    Assign {
        node: u32,
        rounds: u32,
        experts: Vec<u32>,
    },
    GlobalModel {
        round: u32,
        blocks: TensorBlockPayload,
    },
    LocalUpdate {
        round: u32,
        blocks: TensorBlockPayload,
    },
    MergeApplied {
        round: u32,
        alpha: f64,
        /// `‖Δ_merge‖²` per layer.
        displacement: Vec<f64>,
    },
    RoundDone {
        round: u32,
    },
    Bye,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello { .. } => MessageKind::Hello,
            Message::Assign { .. } => MessageKind::Assign,
            Message::GlobalModel { .. } => MessageKind::GlobalModel,
            Message::LocalUpdate { .. } => MessageKind::LocalUpdate,
            Message::MergeApplied { .. } => MessageKind::MergeApplied,
            Message::RoundDone { .. } => MessageKind::RoundDone,
            Message::Bye => MessageKind::Bye,
        }
    }

    pub fn to_wire(&self) -> Result<WireMessage, PayloadError> {
        let (round, payload) = match self {
            Message::Hello { node, config_hash } => {
                let mut p = node.to_le_bytes().to_vec();
                p.extend_from_slice(config_hash);
                (0, p)
            }
            Message::Assign {
                node,
                rounds,
                experts,
            } => {
                let mut p = Vec::with_capacity(12 + 4 * experts.len());
                p.extend_from_slice(&node.to_le_bytes());
                p.extend_from_slice(&rounds.to_le_bytes());
                p.extend_from_slice(&(experts.len() as u32).to_le_bytes());
                for e in experts {
                    p.extend_from_slice(&e.to_le_bytes());
                }
                (0, p)
            }
            Message::GlobalModel { round, blocks } | Message::LocalUpdate { round, blocks } => {
                (*round, blocks.encode()?)
            }
            Message::MergeApplied {
                round,
                alpha,
                displacement,
            } => {
                let mut p = alpha.to_le_bytes().to_vec();
                p.extend_from_slice(&(displacement.len() as u32).to_le_bytes());
                for d in displacement {
                    p.extend_from_slice(&d.to_le_bytes());
                }
                (*round, p)
            }
            Message::RoundDone { round } => (*round, Vec::new()),
            Message::Bye => (0, Vec::new()),
        };
        Ok(WireMessage::new(self.kind(), round, payload))
    }

    pub fn from_wire(w: &WireMessage) -> Result<Self, PayloadError> {
        let mut r = Reader::new(&w.payload);
        let malformed = |kind| PayloadError::Malformed { kind };
        let msg = match w.kind {
            MessageKind::Hello => {
                let node = r.u32()?;
                let config_hash = r.take(32)?.try_into().expect("32 bytes");
                Message::Hello { node, config_hash }
            }
            MessageKind::Assign => {
                let node = r.u32()?;
                let rounds = r.u32()?;
                let n = r.u32()? as usize;
                if n > r.remaining() / 4 {
                    return Err(malformed("ASSIGN"));
                }
                let experts = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
                Message::Assign {
                    node,
                    rounds,
                    experts,
                }
            }
            MessageKind::GlobalModel => {
                return Ok(Message::GlobalModel {
                    round: w.round,
                    blocks: TensorBlockPayload::decode(&w.payload)?,
                })
            }
            MessageKind::LocalUpdate => {
                return Ok(Message::LocalUpdate {
                    round: w.round,
                    blocks: TensorBlockPayload::decode(&w.payload)?,
                })
            }
            MessageKind::MergeApplied => {
                let alpha = r.f64()?;
                let n = r.u32()? as usize;
                if n > r.remaining() / 8 {
                    return Err(malformed("MERGE_APPLIED"));
                }
                let displacement = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
                Message::MergeApplied {
                    round: w.round,
                    alpha,
                    displacement,
                }
            }
            MessageKind::RoundDone => Message::RoundDone { round: w.round },
            MessageKind::Bye => Message::Bye,
        };
        r.finish()?;
        Ok(msg)
    }
}
