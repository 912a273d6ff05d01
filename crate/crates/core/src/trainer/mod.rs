//! Per-node inner optimization under a block mask, the `H`-step local round
//! and the server-side outer step.

mod mask;
mod optim;
mod outer;
mod round;
mod schedule;

pub use mask::TrainMask;
pub use optim::{masked_step, AdamWConfig, InnerOptimizer, MaskedOptimizerState};
pub use outer::{outer_step, OuterKind, OuterOptimizer};
pub use round::{local_round, BatchSource, LocalRoundResult, RoundOptions, StepTrace};
pub use schedule::LrSchedule;

use thiserror::Error;

use crate::model::{BlockId, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no optimizer state for trainable block {0}")]
    MissingState(BlockId),
    #[error("no gradient for trainable block {0}")]
    MissingGrad(BlockId),
    #[error("non-finite loss at local step {step}")]
    NonFinite { step: usize },
    #[error("a local round needs at least one step")]
    ZeroSteps,
    #[error("barrier violation: expected {expected} node updates, got {got}")]
    Barrier { expected: usize, got: usize },
    #[error("block {0} missing from every node update")]
    Uncovered(BlockId),
    #[error("block {block}: shape {actual:?} does not match {expected:?}")]
    Shape {
        block: BlockId,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
