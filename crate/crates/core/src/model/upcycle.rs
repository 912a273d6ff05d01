use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ExpertParams, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpcycleSpec {
    pub experts: usize,
    pub active: usize,
    /// Fraction of each replica's entries that receive noise.
    pub noise_frac: f64,
    pub noise_std: f64,
    /// Std of the freshly drawn router weights.
    pub router_std: f64,
    pub seed: u64,
}

impl Default for UpcycleSpec {
    fn default() -> Self {
        Self {
            experts: 8,
            active: 2,
            noise_frac: 0.5,
            noise_std: 0.02,
            router_std: 0.02,
            seed: 0,
        }
    }
}

/// Builds an M-expert model from a single-expert one. Every replica starts as
/// a copy of the dense FFN; a uniformly random `noise_frac` subset of its
/// entries (chosen independently per matrix and replica) gets additive
/// `N(0, noise_std²)` noise. Routers are redrawn with `router_std`. The result
/// always renormalizes gate weights after top-k.
pub fn upcycle_from_dense(dense: &ModelParams, spec: &UpcycleSpec) -> Result<ModelParams> {
    if dense.config.experts != 1 {
        return Err(ModelError::Upcycle(format!(
            "source must have exactly one expert, has {}",
            dense.config.experts
        )));
    }
    if spec.experts < 2 {
        return Err(ModelError::Upcycle("need at least two experts".into()));
    }
    if !(0.0..=1.0).contains(&spec.noise_frac) || !(spec.noise_std >= 0.0) {
        return Err(ModelError::Upcycle("noise fraction must be in [0,1], std >= 0".into()));
    }
    let mut config = dense.config.clone();
    config.experts = spec.experts;
    config.active = spec.active;
    config.renormalize_after_topk = true;
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));
    let perturb = |src: &Tensor, rng: &mut ChaCha8Rng| -> Tensor {
        let mut t = src.clone();
        let n = t.numel();
        let count = (spec.noise_frac * n as f64).round() as usize;
        let picks = index::sample(rng, n, count.min(n));
        if let Some(noise) = &noise {
            let data = t.data_mut();
            for i in picks {
                data[i] += noise.sample(rng) as f32;
            }
        }
        t
    };

    let experts = dense
        .experts
        .iter()
        .map(|layer| {
            let src = &layer[0];
            (0..spec.experts)
                .map(|_| ExpertParams {
                    wg: perturb(&src.wg, &mut rng),
                    wu: perturb(&src.wu, &mut rng),
                    wd: perturb(&src.wd, &mut rng),
                })
                .collect()
        })
        .collect();
    let mut shared = dense.shared.clone();
    shared.routers = (0..config.layers)
        .map(|_| Tensor::randn(&[config.hidden, spec.experts], spec.router_std, &mut rng))
        .collect();
    Ok(ModelParams {
        config,
        shared,
        experts,
    })
}
