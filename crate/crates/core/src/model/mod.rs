//! Desk-scale MoE language model: embedding, `L` blocks of RMSNorm followed
//! by routed SwiGLU experts with a residual connection, a final norm and an
//! output head.

mod forward;
mod params;
mod partition;
mod upcycle;

pub use forward::{
    loss_and_grads, model_loss, model_loss_with, moe_forward, route, routing_trace, Batch,
    LossBundle, LossFunction, ParamGrads, RoutingDecision,
};
pub use params::{BlockId, ExpertMatrix, ExpertParams, ModelParams, SharedParams};
pub use partition::param_partition;
pub use upcycle::{upcycle_from_dense, UpcycleSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("cannot partition {experts} experts over {nodes} nodes: {reason}")]
    Partition {
        experts: usize,
        nodes: usize,
        reason: &'static str,
    },
    #[error("unknown parameter block {0:?}")]
    UnknownBlock(String),
    #[error("block {name}: expected shape {expected:?}, got {actual:?}")]
    BlockShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("upcycling: {0}")]
    Upcycle(String),
    #[error("batch: {0}")]
    Batch(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub ce: f32,
    pub lb: f32,
    pub moe_z: f32,
    pub z: f32,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            ce: 1.0,
            lb: 0.01,
            moe_z: 0.001,
            z: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub layers: usize,
    pub experts: usize,
    pub active: usize,
    pub renormalize_after_topk: bool,
    #[serde(default)]
    pub tied_head: bool,
    #[serde(default)]
    pub coefficients: LossCoefficients,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("layers", self.layers),
            ("experts", self.experts),
            ("active", self.active),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.active > self.experts {
            return Err(ModelError::Config(format!(
                "active experts {} exceeds total {}",
                self.active, self.experts
            )));
        }
        let c = self.coefficients;
        if [c.ce, c.lb, c.moe_z, c.z].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ModelError::Config("loss coefficients must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Scalars in one expert (`Wg`, `Wu`, `Wd`).
    pub fn expert_size(&self) -> usize {
        3 * self.hidden * self.intermediate
    }

    /// |Φ|
    pub fn expert_params(&self) -> usize {
        self.layers * self.experts * self.expert_size()
    }

    /// |ψ|
    pub fn shared_params(&self) -> usize {
        let head = if self.tied_head { 0 } else { self.hidden * self.vocab };
        self.vocab * self.hidden
            + head
            + self.layers * (self.hidden + self.hidden * self.experts)
            + self.hidden
    }

    pub fn total_params(&self) -> usize {
        self.shared_params() + self.expert_params()
    }
}
