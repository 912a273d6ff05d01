use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError, TrainMask};
use crate::model::{BlockId, ModelParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerOptimizer {
    AdamW(AdamWConfig),
    /// Plain `θ ← θ − η g`, used by the theory checks.
    Sgd,
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        InnerOptimizer::AdamW(AdamWConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    grad: Vec<f32>,
}

/// Optimizer state for the trainable blocks of one node. Frozen blocks have
/// no entry at all.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedOptimizerState {
    pub optimizer: InnerOptimizer,
    step: u64,
    slots: BTreeMap<BlockId, Slot>,
}

impl MaskedOptimizerState {
    pub fn new(params: &ModelParams, mask: &TrainMask, optimizer: InnerOptimizer) -> Self {
        let slots = mask
            .trainable_blocks(&params.config)
            .into_iter()
            .filter_map(|id| params.block(id).map(|t| (id, t.numel())))
            .map(|(id, n)| {
                (
                    id,
                    Slot {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        grad: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self {
            optimizer,
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, id: BlockId) -> bool {
        self.slots.contains_key(&id)
    }

    /// Allocated optimizer scalars: first and second moments plus the
    /// gradient buffer.
    pub fn scalar_count(&self) -> usize {
        self.slots
            .values()
            .map(|s| s.m.len() + s.v.len() + s.grad.len())
            .sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.slots.keys().copied()
    }

    /// Drops the slot of one block (used to exercise the invariant check).
    pub fn forget(&mut self, id: BlockId) {
        self.slots.remove(&id);
    }
}

/// One optimizer step on the trainable blocks of `mask`. Frozen blocks are
/// never read from `grads` and never written in `params`.
pub fn masked_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut MaskedOptimizerState,
    mask: &TrainMask,
    lr: f64,
) -> Result<()> {
    let trainable = mask.trainable_blocks(&params.config);
    for &id in &trainable {
        if !state.slots.contains_key(&id) {
            return Err(TrainError::MissingState(id));
        }
        let g = grads.get(&id).ok_or(TrainError::MissingGrad(id))?;
        let p = params.block(id).expect("trainable block exists");
        if g.shape() != p.shape() {
            return Err(TrainError::Shape {
                block: id,
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let opt = state.optimizer;
    for id in trainable {
        let slot = state.slots.get_mut(&id).expect("checked above");
        slot.grad.copy_from_slice(grads[&id].data());
        let theta = params.block_mut(id).expect("checked above").data_mut();
        match opt {
            InnerOptimizer::Sgd => {
                for (p, &g) in theta.iter_mut().zip(&slot.grad) {
                    *p = (*p as f64 - lr * g as f64) as f32;
                }
            }
            InnerOptimizer::AdamW(c) => {
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, m), v), &g) in theta
                    .iter_mut()
                    .zip(slot.m.iter_mut())
                    .zip(slot.v.iter_mut())
                    .zip(&slot.grad)
                {
                    let g = g as f64;
                    let m1 = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
                    let v1 = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
                    *m = m1 as f32;
                    *v = v1 as f32;
                    let mh = m1 / bc1;
                    let vh = v1 / bc2;
                    let x = *p as f64;
                    *p = (x - lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * x)) as f32;
                }
            }
        }
    }
    Ok(())
}
