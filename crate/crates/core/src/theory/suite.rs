use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    estimate_constants, simulate_spes, convergence_bound, variance_reduction_check, BoundInputs, BoundReport, Layout,
    LogisticSpec, LogisticToy, Objective, QuadraticToy, Result, SimConfig, TheoryProbe, VarianceRow,
};
use crate::merging::MergeSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub rounds: usize,
    pub h: usize,
    pub probe_samples: usize,
    pub variance_reps: usize,
    pub node_counts: Vec<usize>,
    pub merge: MergeSchedule,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            h: 4,
            probe_samples: 40,
            variance_reps: 400,
            node_counts: vec![1, 2, 4, 8],
            merge: MergeSchedule {
                t_merge: 50,
                interval: 5,
                alpha0: 0.1,
                k: 2,
                basis: Default::default(),
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOutcome {
    pub name: String,
    pub eta: f64,
    pub probe: TheoryProbe,
    pub bound: BoundReport,
    pub avg_grad_sq: f64,
    pub bound_holds: bool,
    pub drift_checks: usize,
    pub drift_violations: usize,
    pub max_drift_ratio: f64,
    pub merges: usize,
    /// `max_t ‖Δ_merge‖² / (α_t² B²)`
    pub max_merge_ratio: f64,
    pub merge_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceOutcome {
    pub rows: Vec<VarianceRow>,
    /// Shared-block variance of a single node.
    pub c: f64,
    /// `N · var_N / c` per row; 1 under exact `c/N` scaling.
    pub factors: Vec<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub toys: Vec<ToyOutcome>,
    pub variance: VarianceOutcome,
    pub drift_holds: bool,
    pub bound_holds: bool,
    pub merge_holds: bool,
}

impl SuiteReport {
    pub fn all_hold(&self) -> bool {
        self.drift_holds && self.bound_holds && self.merge_holds && self.variance.holds
    }
}

fn contiguous(experts: usize, nodes: usize) -> Vec<Vec<usize>> {
    let per = experts / nodes;
    (0..nodes).map(|i| (i * per..(i + 1) * per).collect()).collect()
}

fn run_toy(name: &str, obj: &dyn Objective, smoothness: f64, cfg: &SuiteConfig) -> Result<ToyOutcome> {
    let assignment = contiguous(obj.layout().num_experts(), obj.nodes());
    let eta = 1.0 / (4.0 * cfg.h as f64 * smoothness);
    let sim = simulate_spes(
        obj,
        &SimConfig {
            eta,
            h: cfg.h,
            rounds: cfg.rounds,
            assignment: assignment.clone(),
            merge: cfg.merge,
            seed: cfg.seed,
        },
    )?;
    let stride = (cfg.rounds / 10).max(1);
    let points: Vec<Vec<f64>> = sim.iterates.iter().step_by(stride).cloned().collect();
    let mut probe = estimate_constants(obj, &points, &assignment, cfg.probe_samples, cfg.seed ^ 0x5eed)?;
    probe.g = probe.g.max(sim.g_meas);
    let b_sq = sim.b_merge_sq();
    let bound = convergence_bound(
        &probe,
        &BoundInputs {
            eta,
            h: cfg.h,
            nodes: obj.nodes(),
            rounds: cfg.rounds,
            f0_minus_finf: sim.f0 - obj.lower_bound(),
            alphas: sim.alphas(),
            b_merge_sq: b_sq,
        },
    );
    let max_merge_ratio = sim
        .merges
        .iter()
        .filter(|m| m.alpha > 0.0 && b_sq > 0.0)
        .map(|m| m.displacement_sq / (m.alpha * m.alpha * b_sq))
        .fold(0.0, f64::max);
    Ok(ToyOutcome {
        name: name.into(),
        eta,
        probe,
        bound_holds: sim.avg_grad_sq <= bound.total,
        bound,
        avg_grad_sq: sim.avg_grad_sq,
        drift_checks: sim.drift_checks,
        drift_violations: sim.drift_violations,
        max_drift_ratio: sim.max_drift_ratio,
        merges: sim.merges.len(),
        merge_holds: max_merge_ratio <= 1.0,
        max_merge_ratio,
    })
}

/// Drift, bound and merge checks on a quadratic and two logistic toys, plus
/// the shared-gradient variance scaling.
pub fn run_theory_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let quad = QuadraticToy::random(Layout::new(6, 4, 3), 2, 0.5, 2.0, 0.5, 0.2, cfg.seed);
    let iid = LogisticToy::new(LogisticSpec {
        per_node: 256,
        seed: cfg.seed,
        ..Default::default()
    });
    let skew = LogisticToy::new(LogisticSpec {
        per_node: 256,
        label_skew: 0.5,
        seed: cfg.seed,
        ..Default::default()
    });
    let toys = vec![
        run_toy("quadratic", &quad, quad.max_curvature(), cfg)?,
        run_toy("logistic-iid", &iid, iid.smoothness_bound(), cfg)?,
        run_toy("logistic-skewed", &skew, skew.smoothness_bound(), cfg)?,
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta = iid.init(&mut rng);
    let rows = variance_reduction_check(&iid, &theta, &cfg.node_counts, cfg.variance_reps, cfg.seed)?;
    let c = rows
        .iter()
        .find(|r| r.nodes == 1)
        .map_or(rows[0].shared_var * rows[0].nodes as f64, |r| r.shared_var);
    let factors: Vec<f64> = rows.iter().map(|r| r.nodes as f64 * r.shared_var / c).collect();
    let variance = VarianceOutcome {
        holds: factors.iter().all(|f| (0.5..=2.0).contains(f)),
        rows,
        c,
        factors,
    };
    Ok(SuiteReport {
        drift_holds: toys.iter().all(|t| t.drift_violations == 0),
        bound_holds: toys.iter().all(|t| t.bound_holds),
        merge_holds: toys.iter().all(|t| t.merge_holds),
        config: cfg.clone(),
        toys,
        variance,
    })
}
