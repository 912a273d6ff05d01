use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{sq_dist, sq_norm, Objective, Result, TheoryError};

pub const MIN_SAMPLES: usize = 30;

/// Sampled estimates of the constants in the convergence analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryProbe {
    /// Smoothness, as the largest sampled gradient-difference quotient.
    pub l: f64,
    /// Largest stochastic gradient norm seen.
    pub g: f64,
    pub sigma_shared_sq: f64,
    pub sigma_expert_sq: f64,
    /// `max_j ‖∇_{φ_j} f_{o(j)} − ∇_{φ_j} F‖`
    pub zeta: f64,
}

fn check(node: usize, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TheoryError::NonFinite { node })
    }
}

/// Estimates the constants around the parameter points `points`, node `i`
/// owning `assignment[i]`. Each of the `samples` draws visits one point.
pub fn estimate_constants(
    obj: &dyn Objective,
    points: &[Vec<f64>],
    assignment: &[Vec<usize>],
    samples: usize,
    seed: u64,
) -> Result<TheoryProbe> {
    if samples < MIN_SAMPLES {
        return Err(TheoryError::TooFewSamples {
            min: MIN_SAMPLES,
            got: samples,
        });
    }
    if points.is_empty() || assignment.len() != obj.nodes() {
        return Err(TheoryError::Setup("need probe points and one assignment per node".into()));
    }
    let layout = obj.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = TheoryProbe {
        l: 0.0,
        g: 0.0,
        sigma_shared_sq: 0.0,
        sigma_expert_sq: 0.0,
        zeta: 0.0,
    };
    let shared = layout.shared_range();

    for s in 0..samples {
        let x = &points[s % points.len()];
        let scale = 10f64.powf(rng.random_range(-2.0..0.0));
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        for i in 0..obj.nodes() {
            let gx = obj.local_grad(i, x);
            let gy = obj.local_grad(i, &y);
            check(i, &gx)?;
            check(i, &gy)?;
            probe.l = probe.l.max((sq_dist(&gx, &gy) / sq_dist(x, &y)).sqrt());
        }
    }

    // variances: mean over draws at each point, max over points and nodes
    let draws = samples;
    for x in points {
        for (i, owned) in assignment.iter().enumerate() {
            let exact = obj.local_grad(i, x);
            check(i, &exact)?;
            let (mut vs, mut ve) = (0.0, 0.0);
            for _ in 0..draws {
                let g = obj.sample_grad(i, x, &mut rng);
                check(i, &g)?;
                probe.g = probe.g.max(sq_norm(&g).sqrt());
                vs += sq_dist(&g[shared.clone()], &exact[shared.clone()]);
                ve += owned
                    .iter()
                    .map(|&j| {
                        let r = layout.expert_range(j);
                        sq_dist(&g[r.clone()], &exact[r])
                    })
                    .sum::<f64>();
            }
            probe.sigma_shared_sq = probe.sigma_shared_sq.max(vs / draws as f64);
            probe.sigma_expert_sq = probe.sigma_expert_sq.max(ve / draws as f64);
        }
        let full = obj.grad(x);
        for (i, owned) in assignment.iter().enumerate() {
            let local = obj.local_grad(i, x);
            for &j in owned {
                let r = layout.expert_range(j);
                probe.zeta = probe.zeta.max(sq_dist(&local[r.clone()], &full[r]).sqrt());
            }
        }
    }
    Ok(probe)
}
