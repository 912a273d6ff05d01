use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::{BlockId, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OuterKind {
    Sgd,
    Nesterov { momentum: f64 },
}

/// Server-side optimizer applied to the mean node delta. Momentum buffers
/// are kept in 64-bit per block.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptimizer {
    pub kind: OuterKind,
    pub lr: f64,
    pub nodes: usize,
    momentum: BTreeMap<BlockId, Vec<f64>>,
}

impl OuterOptimizer {
    pub fn new(kind: OuterKind, lr: f64, nodes: usize) -> Self {
        Self {
            kind,
            lr,
            nodes,
            momentum: BTreeMap::new(),
        }
    }
}

/// Applies the outer optimizer to `global` given each node's updated blocks
/// (local parameter values, restricted to what the node trained). Blocks are
/// averaged over the nodes that provide them; the pseudo-gradient is
/// `θ − mean(θ_i)`.
pub fn outer_step(
    global: &ModelParams,
    updates: &[BTreeMap<BlockId, Tensor>],
    opt: &mut OuterOptimizer,
) -> Result<ModelParams> {
    if updates.len() != opt.nodes {
        return Err(TrainError::Barrier {
            expected: opt.nodes,
            got: updates.len(),
        });
    }
    let mut next = global.clone();
    for (id, theta) in global.blocks() {
        let providers: Vec<&Tensor> = updates.iter().filter_map(|u| u.get(&id)).collect();
        if providers.is_empty() {
            return Err(TrainError::Uncovered(id));
        }
        if let Some(bad) = providers.iter().find(|t| t.shape() != theta.shape()) {
            return Err(TrainError::Shape {
                block: id,
                expected: theta.shape().to_vec(),
                actual: bad.shape().to_vec(),
            });
        }
        let n = providers.len() as f64;
        let delta: Vec<f64> = (0..theta.numel())
            .map(|i| {
                let base = theta.data()[i] as f64;
                let s: f64 = providers.iter().map(|t| t.data()[i] as f64 - base).sum();
                -(s / n)
            })
            .collect();
        let step: Vec<f64> = match opt.kind {
            OuterKind::Sgd => delta,
            OuterKind::Nesterov { momentum } => {
                let buf = opt
                    .momentum
                    .entry(id)
                    .or_insert_with(|| vec![0.0; theta.numel()]);
                buf.iter_mut()
                    .zip(&delta)
                    .map(|(b, &d)| {
                        *b = momentum * *b + d;
                        d + momentum * *b
                    })
                    .collect()
            }
        };
        let out = next.block_mut(id).expect("same config").data_mut();
        for ((o, &x), s) in out.iter_mut().zip(theta.data()).zip(step) {
            *o = (x as f64 - opt.lr * s) as f32;
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 4,
            hidden: 2,
            intermediate: 3,
            layers: 1,
            experts: 2,
            active: 1,
            renormalize_after_topk: false,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    fn all_blocks(p: &ModelParams) -> BTreeMap<BlockId, Tensor> {
        p.blocks().into_iter().map(|(i, t)| (i, t.clone())).collect()
    }

    #[test]
    fn single_node_sgd_unit_lr_adopts_local_model() {
        let g = ModelParams::init(&cfg(), 0).unwrap();
        let local = ModelParams::init(&cfg(), 1).unwrap();
        let mut opt = OuterOptimizer::new(OuterKind::Sgd, 1.0, 1);
        let next = outer_step(&g, &[all_blocks(&local)], &mut opt).unwrap();
        assert!(next.bit_eq(&local));
    }

    #[test]
    fn opposite_deltas_cancel() {
        let g = ModelParams::init(&cfg(), 0).unwrap();
        let shift = |c: f32| {
            let mut p = g.clone();
            p.shared.final_norm = Tensor::new(vec![2], vec![1.0 + c, 1.0 + c]).unwrap();
            let mut m = BTreeMap::new();
            m.insert(BlockId::FinalNorm, p.shared.final_norm.clone());
            for id in ModelParams::block_ids(&g.config) {
                m.entry(id).or_insert_with(|| g.block(id).unwrap().clone());
            }
            m
        };
        let mut opt = OuterOptimizer::new(OuterKind::Sgd, 1.0, 2);
        let next = outer_step(&g, &[shift(2.0), shift(-2.0)], &mut opt).unwrap();
        assert_eq!(next.shared.final_norm.data(), &[1.0, 1.0]);
    }

    #[test]
    fn missing_node_is_a_barrier_violation() {
        let g = ModelParams::init(&cfg(), 0).unwrap();
        let mut opt = OuterOptimizer::new(OuterKind::Sgd, 1.0, 2);
        assert!(matches!(
            outer_step(&g, &[all_blocks(&g)], &mut opt),
            Err(TrainError::Barrier { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn nesterov_matches_recurrence() {
        let g0 = ModelParams::init(&cfg(), 0).unwrap();
        let deltas = [0.5f64, -0.25, 0.125, 1.0, 0.0];
        let (mu, lr) = (0.9, 0.7);
        let mut opt = OuterOptimizer::new(OuterKind::Nesterov { momentum: mu }, lr, 1);
        let mut g = g0.clone();
        // hand-rolled on one coordinate of the final norm
        let mut x = g0.shared.final_norm.data()[0] as f64;
        let mut v = 0.0f64;
        for d in deltas {
            let mut local = g.clone();
            let target = g.shared.final_norm.data()[0] as f64 + d;
            local.shared.final_norm.data_mut()[0] = target as f32;
            let realized = local.shared.final_norm.data()[0] as f64 - g.shared.final_norm.data()[0] as f64;
            g = outer_step(&g, &[all_blocks(&local)], &mut opt).unwrap();
            let pg = -realized;
            v = mu * v + pg;
            x = (x - lr * (pg + mu * v)) as f32 as f64;
            assert!((g.shared.final_norm.data()[0] as f64 - x).abs() < 1e-7);
        }
    }
}
