use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sq_dist, sq_norm, Objective, Result, TheoryError};
use crate::merging::{select_peers, similarity_of_vectors, MergeSchedule};

pub const MIN_VARIANCE_REPS: usize = 200;

/// Relative slack on the drift inequality for floating-point rounding.
const DRIFT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eta: f64,
    pub h: usize,
    pub rounds: usize,
    pub assignment: Vec<Vec<usize>>,
    pub merge: MergeSchedule,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub round: usize,
    pub alpha: f64,
    /// `‖Δ_merge‖²`
    pub displacement_sq: f64,
    /// `M · max_{j,k} ‖φ_j − φ_k‖²` before the merge; bounds
    /// `‖Δ_merge‖²/α²`.
    pub spread_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// `‖∇F(θ^(t))‖²` for `t = 0..T`.
    pub grad_sq: Vec<f64>,
    pub avg_grad_sq: f64,
    pub f0: f64,
    pub final_loss: f64,
    /// `θ^(0) … θ^(T)`
    pub iterates: Vec<Vec<f64>>,
    /// Running max of applied (masked) stochastic gradient norms.
    pub g_meas: f64,
    /// Largest `‖θ_i^(t,h) − θ^(t)‖² / (η²h²G²)` observed.
    pub max_drift_ratio: f64,
    pub drift_checks: usize,
    pub drift_violations: usize,
    pub merges: Vec<MergeRecord>,
}

impl SimResult {
    /// `max_t spread_sq`, an admissible `B²_merge` for this run.
    pub fn b_merge_sq(&self) -> f64 {
        self.merges.iter().map(|m| m.spread_sq).fold(0.0, f64::max)
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.alpha).collect()
    }
}

/// Masked local SGD with sparse synchronization and the optional merge
/// warm-up, all in 64-bit.
pub fn simulate_spes(obj: &dyn Objective, cfg: &SimConfig) -> Result<SimResult> {
    let layout = obj.layout();
    let m = layout.num_experts();
    if cfg.assignment.len() != obj.nodes() {
        return Err(TheoryError::Setup(format!(
            "{} assignments for {} nodes",
            cfg.assignment.len(),
            obj.nodes()
        )));
    }
    let mut owner = vec![usize::MAX; m];
    for (i, owned) in cfg.assignment.iter().enumerate() {
        for &j in owned {
            if j >= m || owner[j] != usize::MAX {
                return Err(TheoryError::Setup(format!("expert {j} unknown or owned twice")));
            }
            owner[j] = i;
        }
    }
    if owner.contains(&usize::MAX) || cfg.h == 0 || cfg.rounds == 0 {
        return Err(TheoryError::Setup("every expert needs an owner; H, T ≥ 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = obj.init(&mut rng);
    let n = obj.nodes() as f64;
    let mut out = SimResult {
        grad_sq: Vec::with_capacity(cfg.rounds),
        avg_grad_sq: 0.0,
        f0: obj.loss(&theta),
        final_loss: 0.0,
        iterates: vec![theta.clone()],
        g_meas: 0.0,
        max_drift_ratio: 0.0,
        drift_checks: 0,
        drift_violations: 0,
        merges: Vec::new(),
    };

    for t in 0..cfg.rounds {
        out.grad_sq.push(sq_norm(&obj.grad(&theta)));
        let mut next = theta.clone();
        next[layout.shared_range()].fill(0.0);
        for (i, owned) in cfg.assignment.iter().enumerate() {
            let mut local = theta.clone();
            for h in 1..=cfg.h {
                let mut g = obj.sample_grad(i, &local, &mut rng);
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(TheoryError::NonFinite { node: i });
                }
                layout.mask(&mut g, owned);
                out.g_meas = out.g_meas.max(sq_norm(&g).sqrt());
                for (p, gi) in local.iter_mut().zip(&g) {
                    *p -= cfg.eta * gi;
                }
                let drift = sq_dist(&local, &theta);
                let cap = (cfg.eta * h as f64 * out.g_meas).powi(2);
                out.drift_checks += 1;
                if cap > 0.0 {
                    out.max_drift_ratio = out.max_drift_ratio.max(drift / cap);
                }
                if drift > cap * (1.0 + DRIFT_SLACK) {
                    out.drift_violations += 1;
                }
            }
            for k in layout.shared_range() {
                next[k] += local[k] / n;
            }
            for &j in owned {
                let r = layout.expert_range(j);
                next[r.clone()].copy_from_slice(&local[r]);
            }
        }
        if cfg.merge.is_active(t) {
            out.merges.push(merge_vectors(&mut next, obj, &cfg.merge, t));
        }
        theta = next;
        out.iterates.push(theta.clone());
    }
    out.avg_grad_sq = out.grad_sq.iter().sum::<f64>() / cfg.rounds as f64;
    out.final_loss = obj.loss(&theta);
    Ok(out)
}

fn merge_vectors(theta: &mut [f64], obj: &dyn Objective, sched: &MergeSchedule, t: usize) -> MergeRecord {
    let layout = obj.layout();
    let m = layout.num_experts();
    let experts: Vec<Vec<f64>> = (0..m).map(|j| theta[layout.expert_range(j)].to_vec()).collect();
    let a = similarity_of_vectors(&experts);
    let alpha = sched.alpha_at(t);
    let mut spread: f64 = 0.0;
    for j in 0..m {
        for k in 0..m {
            spread = spread.max(sq_dist(&experts[j], &experts[k]));
        }
    }
    let mut disp = 0.0;
    for (j, own) in experts.iter().enumerate() {
        let peers = select_peers(&a, j, sched.k);
        if peers.is_empty() {
            continue;
        }
        let scale = alpha / peers.len() as f64;
        for (c, slot) in layout.expert_range(j).enumerate() {
            let pull: f64 = peers.iter().map(|&k| experts[k][c] - own[c]).sum();
            let new = own[c] + scale * pull;
            disp += (new - own[c]).powi(2);
            theta[slot] = new;
        }
    }
    MergeRecord {
        round: t,
        alpha,
        displacement_sq: disp,
        spread_sq: m as f64 * spread,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub nodes: usize,
    /// `E‖ĝ_ψ − ∇_ψ f‖²` of the `N`-averaged shared gradient.
    pub shared_var: f64,
    /// Same for one expert block, which only its owner estimates.
    pub expert_var: f64,
}

/// Monte-Carlo variance of the shared-block estimator averaged over `N`
/// nodes drawing from node 0's distribution, at `theta`.
pub fn variance_reduction_check(
    obj: &dyn Objective,
    theta: &[f64],
    node_counts: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if reps < MIN_VARIANCE_REPS {
        return Err(TheoryError::TooFewSamples {
            min: MIN_VARIANCE_REPS,
            got: reps,
        });
    }
    let layout = obj.layout();
    if layout.num_experts() == 0 {
        return Err(TheoryError::Setup("need at least one expert block".into()));
    }
    let shared = layout.shared_range();
    let expert = layout.expert_range(0);
    let exact = obj.local_grad(0, theta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    node_counts
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(TheoryError::Setup("node count must be positive".into()));
            }
            let (mut vs, mut ve) = (0.0, 0.0);
            for _ in 0..reps {
                let mut avg = vec![0.0; shared.len()];
                for i in 0..n {
                    let g = obj.sample_grad(0, theta, &mut rng);
                    if i == 0 {
                        ve += sq_dist(&g[expert.clone()], &exact[expert.clone()]);
                    }
                    for (a, x) in avg.iter_mut().zip(&g[shared.clone()]) {
                        *a += x / n as f64;
                    }
                }
                vs += sq_dist(&avg, &exact[shared.clone()]);
            }
            Ok(VarianceRow {
                nodes: n,
                shared_var: vs / reps as f64,
                expert_var: ve / reps as f64,
            })
        })
        .collect()
}
