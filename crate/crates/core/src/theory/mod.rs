//! Empirical checks of the convergence analysis on small convex objectives
//! with a shared block and per-expert blocks: constant estimation, the
//! bound expression, a masked local-SGD simulator and the shared-gradient
//! variance-reduction measurement.

mod bound;
mod probe;
mod sim;
mod suite;
mod toys;

pub use bound::{convergence_bound, BoundInputs, BoundReport, BoundTerms};
pub use probe::{estimate_constants, TheoryProbe, MIN_SAMPLES};
pub use sim::{
    simulate_spes, variance_reduction_check, MergeRecord, SimConfig, SimResult, VarianceRow,
    MIN_VARIANCE_REPS,
};
pub use suite::{run_theory_suite, SuiteConfig, SuiteReport, ToyOutcome, VarianceOutcome};
pub use toys::{LogisticSpec, LogisticToy, QuadraticToy};

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("non-finite gradient at node {node}")]
    NonFinite { node: usize },
    #[error("invalid setup: {0}")]
    Setup(String),
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;

/// Flat parameter vector: `shared` coordinates first, then each expert's
/// block in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub shared: usize,
    pub experts: Vec<usize>,
}

impl Layout {
    pub fn new(shared: usize, experts: usize, expert_dim: usize) -> Self {
        Self {
            shared,
            experts: vec![expert_dim; experts],
        }
    }

    pub fn dim(&self) -> usize {
        self.shared + self.experts.iter().sum::<usize>()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn shared_range(&self) -> Range<usize> {
        0..self.shared
    }

    pub fn expert_range(&self, j: usize) -> Range<usize> {
        let start = self.shared + self.experts[..j].iter().sum::<usize>();
        start..start + self.experts[j]
    }

    /// Zeroes every coordinate outside shared plus `owned` experts.
    pub fn mask(&self, v: &mut [f64], owned: &[usize]) {
        for j in 0..self.num_experts() {
            if !owned.contains(&j) {
                v[self.expert_range(j)].fill(0.0);
            }
        }
    }
}

/// `F = (1/N) Σ f_i` over node-local objectives with stochastic gradients.
pub trait Objective: Sync {
    fn layout(&self) -> &Layout;
    fn nodes(&self) -> usize;
    fn local_loss(&self, node: usize, theta: &[f64]) -> f64;
    fn local_grad(&self, node: usize, theta: &[f64]) -> Vec<f64>;
    /// Unbiased estimate of `∇f_node`.
    fn sample_grad(&self, node: usize, theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// A value no larger than `inf F`.
    fn lower_bound(&self) -> f64;
    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    fn loss(&self, theta: &[f64]) -> f64 {
        (0..self.nodes()).map(|i| self.local_loss(i, theta)).sum::<f64>() / self.nodes() as f64
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        for i in 0..self.nodes() {
            for (a, b) in g.iter_mut().zip(self.local_grad(i, theta)) {
                *a += b;
            }
        }
        let n = self.nodes() as f64;
        g.iter_mut().for_each(|x| *x /= n);
        g
    }
}

pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
