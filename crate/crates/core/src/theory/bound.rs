use serde::{Deserialize, Serialize};

use super::TheoryProbe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eta: f64,
    pub h: usize,
    pub nodes: usize,
    pub rounds: usize,
    /// `F(θ⁰) − F_inf`
    pub f0_minus_finf: f64,
    /// `α_t` for every merge round `t < T_merge`.
    pub alphas: Vec<f64>,
    /// `B²_merge`
    pub b_merge_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `4(F₀ − F_inf)/(ηHT)`
    pub optimization: f64,
    /// `6ηL(σ_ψ²/N + σ_Φ²)`
    pub variance: f64,
    /// `12L²η²H²G²`
    pub drift: f64,
    /// `12ζ_Φ²`
    pub heterogeneity: f64,
    /// `L·B²/(ηHT) · Σα_t²`
    pub merge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub total: f64,
    pub terms: BoundTerms,
    /// `γL ≤ 1/4` with `γ = ηH`.
    pub step_condition: bool,
    /// The weaker `ηL ≤ 1/4`.
    pub eta_condition: bool,
}

/// Right-hand side of the averaged squared-gradient bound. Computed even
/// when the step condition fails; the flags report it.
pub fn convergence_bound(probe: &TheoryProbe, inp: &BoundInputs) -> BoundReport {
    let (l, eta, h) = (probe.l, inp.eta, inp.h as f64);
    let eht = eta * h * inp.rounds as f64;
    let terms = BoundTerms {
        optimization: 4.0 * inp.f0_minus_finf / eht,
        variance: 6.0 * eta * l * (probe.sigma_shared_sq / inp.nodes as f64 + probe.sigma_expert_sq),
        drift: 12.0 * l * l * eta * eta * h * h * probe.g * probe.g,
        heterogeneity: 12.0 * probe.zeta * probe.zeta,
        merge: l * inp.b_merge_sq / eht * inp.alphas.iter().map(|a| a * a).sum::<f64>(),
    };
    BoundReport {
        total: terms.optimization + terms.variance + terms.drift + terms.heterogeneity + terms.merge,
        terms,
        step_condition: eta * h * l <= 0.25,
        eta_condition: eta * l <= 0.25,
    }
}
