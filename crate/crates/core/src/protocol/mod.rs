//! Parameter-server synchronization: framed wire format, tensor payloads,
//! the round state machine, transports, server and worker loops, and byte
//! accounting.

mod checkpoint;
mod ledger;
mod message;
mod payload;
mod round;
mod server;
mod transport;
mod wire;
mod worker;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_TRAILER};
pub use ledger::{CommLedger, Direction, LedgerEntry, Traffic};
pub use message::{ConfigHash, Message};
pub use payload::{block_overhead, PayloadError, TensorBlockPayload, DTYPE_F32};
pub use round::{validate_assignment, Aggregation, RoundState};
pub use server::{run_in_process, run_server, ServerConfig, ServerOutcome};
pub use transport::{
    memory_pair, tcp_accept, tcp_connect, tcp_connection, Connection, FrameReceiver, FrameSender,
    DEFAULT_TIMEOUT,
};
pub use wire::{FrameHeader, MessageKind, WireError, WireMessage, HEADER_LEN, MAGIC, MAX_PAYLOAD, VERSION};
pub use worker::{run_worker, LocalTrainer, WorkerOutcome};

use thiserror::Error;

use crate::model::{BlockId, ModelConfig, ModelError, ModelParams};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("peer disconnected")]
    Disconnected,
    #[error("unexpected {got} from {from}, expected {expected}")]
    UnexpectedMessage {
        from: String,
        got: MessageKind,
        expected: &'static str,
    },
    #[error("round mismatch: expected {expected}, got {got}")]
    RoundMismatch { expected: u32, got: u32 },
    #[error("node {node} pushed twice in round {round}")]
    DuplicatePush { node: usize, round: u32 },
    #[error("node {node} uploaded non-owned block {block}")]
    NonOwnedBlock { node: usize, block: String },
    #[error("node {node} did not upload {block}")]
    MissingBlock { node: usize, block: String },
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("block {block}: shape {actual:?} does not match {expected:?}")]
    BlockShape {
        block: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("config hash mismatch for node {node}")]
    ConfigHashMismatch { node: u32 },
    #[error("unknown node {0}")]
    UnknownNode(u32),
    #[error("node {0} connected twice")]
    DuplicateNode(u32),
    #[error("barrier violation: expected {expected} updates, got {got}")]
    Barrier { expected: usize, got: usize },
    #[error("invalid assignment: {0}")]
    Assignment(String),
    #[error("node {node} modified frozen block {block}")]
    FrozenBlockChanged { node: u32, block: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

/// The blocks of `params` selected by `keep`, in canonical order.
pub fn blocks_payload(params: &ModelParams, keep: impl Fn(BlockId) -> bool) -> TensorBlockPayload {
    TensorBlockPayload::new(
        params
            .blocks()
            .into_iter()
            .filter(|(id, _)| keep(*id))
            .map(|(id, t)| (id.to_string(), t.clone()))
            .collect(),
    )
}

/// Rebuilds a full model from a payload carrying every block.
pub fn params_from_payload(config: &ModelConfig, payload: TensorBlockPayload) -> Result<ModelParams> {
    let blocks = payload
        .blocks
        .into_iter()
        .map(|(name, t)| {
            name.parse::<BlockId>()
                .map(|id| (id, t))
                .map_err(|_| ProtocolError::UnknownBlock(name))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams::from_blocks(config, blocks)?)
}
