use super::{masked_step, LrSchedule, MaskedOptimizerState, Result, TrainError, TrainMask};
use crate::model::{loss_and_grads, Batch, LossBundle, ModelParams};

/// Sequential mini-batch stream of one node's shard.
pub trait BatchSource {
    fn next_batch(&mut self) -> Batch;
}

impl<F: FnMut() -> Batch> BatchSource for F {
    fn next_batch(&mut self) -> Batch {
        self()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOptions {
    pub steps: usize,
    pub schedule: LrSchedule,
    /// Global index of the first step, for the learning-rate schedule.
    pub step_offset: usize,
    pub record_trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub lr: f64,
    /// `‖θ_i^(t,h) − θ^(t)‖²` after step `h`.
    pub drift_sq: f64,
    /// `‖θ_i^(t,h) − θ_i^(t,h−1)‖ / lr`
    pub update_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LocalRoundResult {
    pub params: ModelParams,
    pub steps: usize,
    pub losses: Vec<LossBundle>,
    pub trace: Vec<StepTrace>,
}

fn sq_dist(a: &ModelParams, b: &ModelParams) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks())
        .map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| {
                    let d = p as f64 - q as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .sum()
}

/// `H` masked optimizer steps starting from the global model. The caller
/// owns the optimizer state and decides whether it persists across rounds.
pub fn local_round(
    global: &ModelParams,
    source: &mut dyn BatchSource,
    mask: &TrainMask,
    state: &mut MaskedOptimizerState,
    opts: &RoundOptions,
) -> Result<LocalRoundResult> {
    if opts.steps == 0 {
        return Err(TrainError::ZeroSteps);
    }
    let mut params = global.clone();
    let mut losses = Vec::with_capacity(opts.steps);
    let mut trace = Vec::new();
    for h in 0..opts.steps {
        let batch = source.next_batch();
        let (loss, grads) = loss_and_grads(&params, &batch, &|id| mask.is_trainable(id))?;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { step: h });
        }
        let lr = opts.schedule.at(opts.step_offset + h);
        let prev = opts.record_trace.then(|| params.clone());
        masked_step(&mut params, &grads, state, mask, lr)?;
        if let Some(prev) = prev {
            trace.push(StepTrace {
                lr,
                drift_sq: sq_dist(&params, global),
                update_norm: sq_dist(&params, &prev).sqrt() / lr,
            });
        }
        losses.push(loss);
    }
    Ok(LocalRoundResult {
        params,
        steps: opts.steps,
        losses,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockId, ModelConfig};
    use crate::trainer::{AdamWConfig, InnerOptimizer};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 8,
            hidden: 4,
            intermediate: 6,
            layers: 1,
            experts: 4,
            active: 2,
            renormalize_after_topk: false,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    fn stream(seed: u32) -> impl FnMut() -> Batch {
        let mut i = seed;
        move || {
            i = i.wrapping_mul(1103515245).wrapping_add(12345);
            let toks: Vec<u32> = (0..10).map(|k| (i >> 8).wrapping_add(k * 3) % 8).collect();
            Batch::new(2, 5, toks).unwrap()
        }
    }

    fn opts(steps: usize) -> RoundOptions {
        RoundOptions {
            steps,
            schedule: LrSchedule::constant(0.01),
            step_offset: 0,
            record_trace: true,
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let p = ModelParams::init(&cfg(), 0).unwrap();
        let mask = TrainMask::full(0, &p.config);
        let mut st = MaskedOptimizerState::new(&p, &mask, InnerOptimizer::default());
        assert!(matches!(
            local_round(&p, &mut stream(1), &mask, &mut st, &opts(0)),
            Err(TrainError::ZeroSteps)
        ));
    }

    #[test]
    fn zero_coefficients_leave_params_unchanged() {
        let mut c = cfg();
        c.coefficients = crate::model::LossCoefficients {
            ce: 0.0,
            lb: 0.0,
            moe_z: 0.0,
            z: 0.0,
        };
        let p = ModelParams::init(&c, 0).unwrap();
        let mask = TrainMask::full(0, &c);
        let opt = InnerOptimizer::AdamW(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut st = MaskedOptimizerState::new(&p, &mask, opt);
        let r = local_round(&p, &mut stream(1), &mask, &mut st, &opts(1)).unwrap();
        assert!(r.params.bit_eq(&p));
    }

    #[test]
    fn disjoint_masks_share_trajectory_on_shared_blocks() {
        let p = ModelParams::init(&cfg(), 3).unwrap();
        let run = |owned: &[usize]| {
            let mask = TrainMask::new(0, owned.iter().copied());
            let mut st = MaskedOptimizerState::new(&p, &mask, InnerOptimizer::default());
            local_round(&p, &mut stream(7), &mask, &mut st, &opts(3)).unwrap()
        };
        let (a, b) = (run(&[0, 1]), run(&[2, 3]));
        for (id, t) in p.blocks() {
            if let BlockId::Expert { expert, .. } = id {
                assert_eq!(a.params.block(id).unwrap() == t, expert >= 2, "{id}");
                assert_eq!(b.params.block(id).unwrap() == t, expert < 2, "{id}");
            }
        }
        // one step from identical params: shared updates must be identical
        let one = |owned: &[usize]| {
            let mask = TrainMask::new(0, owned.iter().copied());
            let mut st = MaskedOptimizerState::new(&p, &mask, InnerOptimizer::default());
            local_round(&p, &mut stream(7), &mask, &mut st, &opts(1)).unwrap()
        };
        let (a, b) = (one(&[0, 1]), one(&[2, 3]));
        for id in ModelParams::shared_block_ids(&p.config) {
            assert_eq!(a.params.block(id), b.params.block(id), "{id}");
        }
    }

    #[test]
    fn drift_within_sgd_bound() {
        let p = ModelParams::init(&cfg(), 4).unwrap();
        let mask = TrainMask::new(0, [1]);
        let mut st = MaskedOptimizerState::new(&p, &mask, InnerOptimizer::Sgd);
        let r = local_round(&p, &mut stream(2), &mask, &mut st, &opts(8)).unwrap();
        let mut g_max: f64 = 0.0;
        for (h, s) in r.trace.iter().enumerate() {
            g_max = g_max.max(s.update_norm);
            let bound = s.lr * s.lr * ((h + 1) as f64).powi(2) * g_max * g_max;
            assert!(s.drift_sq <= bound * (1.0 + 1e-9), "step {h}");
        }
    }
}
