//! Static memory and communication accounting in parameter units, counted
//! from live block shapes, plus the exact framing overhead of a round.

use serde::{Deserialize, Serialize};

use crate::model::{param_partition, BlockId, LossCoefficients, ModelConfig, ModelError, ModelParams};
use crate::protocol::{block_overhead, HEADER_LEN};

/// Vocabulary assumed by the published-size presets.
pub const PRESET_VOCAB: usize = 150_000;

fn preset(hidden: usize, intermediate: usize, layers: usize, experts: usize) -> ModelConfig {
    ModelConfig {
        vocab: PRESET_VOCAB,
        hidden,
        intermediate,
        layers,
        experts,
        active: 2,
        renormalize_after_topk: true,
        tied_head: false,
        coefficients: LossCoefficients::default(),
    }
}

/// 16 layers, 16 experts, d=1536, f=1280.
pub fn preset_2b() -> ModelConfig {
    preset(1536, 1280, 16, 16)
}

/// 16 layers, 32 experts, d=2048, f=2048.
pub fn preset_7b() -> ModelConfig {
    preset(2048, 2048, 16, 32)
}

/// Shared parameters a full transformer would add per layer: four `d×d`
/// attention projections and the pre-attention norm.
pub fn attention_params(config: &ModelConfig) -> u64 {
    let d = config.hidden as u64;
    config.layers as u64 * (4 * d * d + d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// `|ψ|`
    pub shared: u64,
    /// `|Φ|`
    pub experts: u64,
    /// `|Φᵢ|` per node.
    pub per_node_experts: Vec<u64>,
}

impl ParamCounts {
    /// Counts every block shape of `config` under `assignment`.
    pub fn live(config: &ModelConfig, assignment: &[Vec<usize>]) -> Self {
        let mut shared = 0u64;
        let mut per_expert = vec![0u64; config.experts];
        for id in ModelParams::block_ids(config) {
            let n: u64 = ModelParams::expected_shape(config, id)
                .expect("canonical block")
                .iter()
                .map(|&d| d as u64)
                .product();
            match id.expert_index() {
                Some(j) => per_expert[j] += n,
                None => shared += n,
            }
        }
        Self {
            shared,
            experts: per_expert.iter().sum(),
            per_node_experts: assignment
                .iter()
                .map(|owned| owned.iter().map(|&j| per_expert[j]).sum())
                .collect(),
        }
    }

    pub fn with_attention(mut self, config: &ModelConfig) -> Self {
        self.shared += attention_params(config);
        self
    }

    pub fn nodes(&self) -> usize {
        self.per_node_experts.len()
    }

    pub fn max_node_experts(&self) -> u64 {
        self.per_node_experts.iter().copied().max().unwrap_or(0)
    }
}

/// Per-node static parameter units: weights, gradients and two optimizer
/// moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryUnits {
    pub centralized: u64,
    pub diloco: u64,
    /// Largest node, `4|ψ| + |Φ| + 3|Φᵢ|`.
    pub spes: u64,
}

/// Parameters crossing the wire per round, all nodes, both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommUnits {
    pub diloco: u64,
    pub spes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub counts: ParamCounts,
    pub nodes: usize,
    pub memory: MemoryUnits,
    pub comm: CommUnits,
    /// SPES / DiLoCo per-round communication.
    pub comm_ratio: f64,
    /// SPES / DiLoCo per-node memory.
    pub memory_ratio: f64,
    /// Largest per-node upload, `|ψ| + |Φᵢ|`.
    pub upload_per_node: u64,
    /// `|ψ| + |Φ|`
    pub download_per_node: u64,
}

impl CostReport {
    pub fn from_counts(counts: ParamCounts) -> Self {
        let (psi, phi) = (counts.shared, counts.experts);
        let n = counts.nodes() as u64;
        let phi_i = counts.max_node_experts();
        let memory = MemoryUnits {
            centralized: 4 * (psi + phi),
            diloco: 4 * (psi + phi),
            spes: 4 * psi + phi + 3 * phi_i,
        };
        let comm = CommUnits {
            diloco: 2 * n * (psi + phi),
            spes: counts.per_node_experts.iter().map(|&p| 2 * psi + phi + p).sum(),
        };
        Self {
            nodes: counts.nodes(),
            memory,
            comm,
            comm_ratio: comm.spes as f64 / comm.diloco as f64,
            memory_ratio: memory.spes as f64 / memory.diloco as f64,
            upload_per_node: psi + phi_i,
            download_per_node: psi + phi,
            counts,
        }
    }

    /// Units converted to bytes at `width` bytes per parameter.
    pub fn bytes(units: u64, width: u64) -> u64 {
        units * width
    }
}

/// Report for `config` over `nodes` with the contiguous partition.
/// `attention` adds the accounting-only attention parameters to `|ψ|`.
pub fn cost_report(config: &ModelConfig, nodes: usize, attention: bool) -> Result<CostReport, ModelError> {
    config.validate()?;
    let assignment = param_partition(config.experts, nodes)?;
    let mut counts = ParamCounts::live(config, &assignment);
    if attention {
        counts = counts.with_attention(config);
    }
    Ok(CostReport::from_counts(counts))
}

/// Framing bytes added on top of raw parameter values for one round of
/// model traffic: one GLOBAL_MODEL down and one LOCAL_UPDATE up per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundOverhead {
    pub up: u64,
    pub down: u64,
}

impl RoundOverhead {
    pub fn total(&self) -> u64 {
        self.up + self.down
    }
}

fn payload_overhead(config: &ModelConfig, keep: impl Fn(BlockId) -> bool) -> u64 {
    let blocks: u64 = ModelParams::block_ids(config)
        .into_iter()
        .filter(|&id| keep(id))
        .map(|id| {
            let rank = ModelParams::expected_shape(config, id).expect("canonical block").len();
            block_overhead(&id.to_string(), rank) as u64
        })
        .sum();
    (HEADER_LEN + 4) as u64 + blocks
}

/// Enumerated overhead for a round where node `i` uploads shared blocks
/// plus `assignment[i]`.
pub fn round_overhead(config: &ModelConfig, assignment: &[Vec<usize>]) -> RoundOverhead {
    let down = payload_overhead(config, |_| true);
    RoundOverhead {
        up: assignment
            .iter()
            .map(|owned| payload_overhead(config, |id| id.expert_index().is_none_or(|j| owned.contains(&j))))
            .sum(),
        down: down * assignment.len() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            hidden: 4,
            intermediate: 6,
            layers: 2,
            experts: 4,
            active: 2,
            renormalize_after_topk: false,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    #[test]
    fn live_counts_match_allocated_model() {
        for tied in [false, true] {
            let cfg = ModelConfig { tied_head: tied, ..tiny() };
            let p = ModelParams::init(&cfg, 0).unwrap();
            let c = ParamCounts::live(&cfg, &param_partition(4, 2).unwrap());
            assert_eq!((c.shared + c.experts) as usize, p.num_params());
            assert_eq!(c.shared as usize, cfg.shared_params());
            assert_eq!(c.per_node_experts, vec![c.experts / 2; 2]);
        }
    }

    #[test]
    fn single_node_degenerates_to_diloco_memory() {
        let r = cost_report(&tiny(), 1, false).unwrap();
        assert_eq!(r.memory.spes, r.memory.diloco);
        assert_eq!(r.comm.spes, r.comm.diloco);
        assert_eq!(r.upload_per_node, r.download_per_node);
    }

    #[test]
    fn spes_never_exceeds_diloco() {
        for n in [1, 2, 4] {
            let r = cost_report(&tiny(), n, false).unwrap();
            assert!(r.memory.spes <= r.memory.diloco);
            assert!(r.comm.spes <= r.comm.diloco);
        }
    }

    #[test]
    fn preset_counts() {
        let r = cost_report(&preset_2b(), 16, true).unwrap();
        assert_eq!(r.counts.shared, 612_238_848);
        assert_eq!(r.counts.experts, 1_509_949_440);
        assert_eq!(r.counts.max_node_experts(), 94_371_840);
        let r = cost_report(&preset_7b(), 4, true).unwrap();
        assert_eq!(r.upload_per_node, 2_494_564_352);
    }
}
