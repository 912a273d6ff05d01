//! Expert-merging warm-up: per-layer cosine similarity between experts,
//! top-K peer selection and a simultaneous task-arithmetic pull toward peers
//! with linearly decaying strength.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::model::{ExpertParams, ModelParams};

/// Which expert weights are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityBasis {
    /// Flattened gate projection `Wg`.
    #[default]
    Gate,
    Up,
    /// `Wg` followed by `Wu`.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeSchedule {
    /// Rounds in the warm-up window; 0 disables merging.
    pub t_merge: usize,
    pub interval: usize,
    pub alpha0: f64,
    pub k: usize,
    #[serde(default)]
    pub basis: SimilarityBasis,
}

impl MergeSchedule {
    pub fn disabled() -> Self {
        Self {
            t_merge: 0,
            interval: 1,
            alpha0: 0.0,
            k: 1,
            basis: SimilarityBasis::Gate,
        }
    }

    /// `α₀ · max(0, 1 − t/T_merge)`
    pub fn alpha_at(&self, t: usize) -> f64 {
        if self.t_merge == 0 {
            return 0.0;
        }
        self.alpha0 * (1.0 - t as f64 / self.t_merge as f64).max(0.0)
    }

    /// Merging happens at 0-based round `t` iff `t < T_merge` and `t` is a
    /// multiple of the interval.
    pub fn is_active(&self, t: usize) -> bool {
        t < self.t_merge && self.interval > 0 && t % self.interval == 0
    }
}

/// Symmetric `M×M` cosine-similarity matrix of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    /// Experts whose compared weights have zero norm.
    pub degenerate: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.size + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.size..(j + 1) * self.size]
    }
}

fn basis_vector(e: &ExpertParams, basis: SimilarityBasis) -> Vec<f64> {
    let cast = |t: &crate::tensor::Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    match basis {
        SimilarityBasis::Gate => cast(&e.wg),
        SimilarityBasis::Up => cast(&e.wu),
        SimilarityBasis::Concat => {
            let mut v = cast(&e.wg);
            v.extend(cast(&e.wu));
            v
        }
    }
}

/// `A_{jk} = ⟨w_j, w_k⟩ / (‖w_j‖‖w_k‖)`. A zero-norm expert has similarity 0
/// with every expert, itself included.
pub fn similarity_matrix(experts: &[ExpertParams], basis: SimilarityBasis) -> SimilarityMatrix {
    let vecs: Vec<Vec<f64>> = experts.iter().map(|e| basis_vector(e, basis)).collect();
    similarity_of_vectors(&vecs)
}

pub fn similarity_of_vectors(vecs: &[Vec<f64>]) -> SimilarityMatrix {
    let m = vecs.len();
    let norms: Vec<f64> = vecs
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let degenerate: Vec<usize> = (0..m).filter(|&j| norms[j] == 0.0).collect();
    for &j in &degenerate {
        warn!("expert {j} has a zero-norm projection; similarity set to 0");
    }
    let mut values = vec![0.0; m * m];
    for j in 0..m {
        for k in j..m {
            let s = if norms[j] == 0.0 || norms[k] == 0.0 {
                0.0
            } else if j == k {
                1.0
            } else {
                let dot: f64 = vecs[j].iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
                (dot / (norms[j] * norms[k])).clamp(-1.0, 1.0)
            };
            values[j * m + k] = s;
            values[k * m + j] = s;
        }
    }
    SimilarityMatrix {
        size: m,
        values,
        degenerate,
    }
}

/// The `K` most similar experts to `j`, excluding `j`; equal similarities
/// resolve to the lower index. Returned in ascending index order.
pub fn select_peers(a: &SimilarityMatrix, j: usize, k: usize) -> Vec<usize> {
    let row = a.row(j);
    let mut others: Vec<usize> = (0..a.size).filter(|&i| i != j).collect();
    others.sort_by(|&x, &y| {
        row[y]
            .partial_cmp(&row[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    others.truncate(k);
    others.sort_unstable();
    others
}

/// Simultaneous `φ̃_j = φ_j + α/K · Σ_{k∈Q_j}(φ_k − φ_j)` over all three
/// matrices, computed from a pre-merge snapshot. Returns `‖Δ‖²` of the layer.
pub fn merge_layer(experts: &mut [ExpertParams], peers: &[Vec<usize>], alpha: f64) -> f64 {
    let snapshot: Vec<ExpertParams> = experts.to_vec();
    let mut disp = 0.0;
    for (j, e) in experts.iter_mut().enumerate() {
        let q = &peers[j];
        if q.is_empty() {
            continue;
        }
        let scale = alpha / q.len() as f64;
        for m in crate::model::ExpertMatrix::ALL {
            let own = snapshot[j].matrix(m).data();
            let out = e.matrix_mut(m).data_mut();
            for (i, o) in out.iter_mut().enumerate() {
                let x = own[i] as f64;
                let pull: f64 = q.iter().map(|&k| snapshot[k].matrix(m).data()[i] as f64 - x).sum();
                *o = (x + scale * pull) as f32;
                let d = *o as f64 - x;
                disp += d * d;
            }
        }
    }
    disp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMerge {
    pub layer: usize,
    pub peers: Vec<Vec<usize>>,
    pub displacement_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub round: usize,
    pub alpha: f64,
    pub layers: Vec<LayerMerge>,
}

impl MergeEvent {
    /// `‖Δ_merge‖²` summed over layers.
    pub fn displacement_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.displacement_sq).sum()
    }
}

/// Runs the warm-up merge on every layer if the schedule is active at
/// 0-based round `t`.
pub fn merge_experts(params: &mut ModelParams, schedule: &MergeSchedule, t: usize) -> Option<MergeEvent> {
    if !schedule.is_active(t) {
        return None;
    }
    let alpha = schedule.alpha_at(t);
    let layers = params
        .experts
        .iter_mut()
        .enumerate()
        .map(|(layer, experts)| {
            let a = similarity_matrix(experts, schedule.basis);
            let peers: Vec<Vec<usize>> = (0..experts.len())
                .map(|j| select_peers(&a, j, schedule.k))
                .collect();
            let displacement_sq = merge_layer(experts, &peers, alpha);
            LayerMerge {
                layer,
                peers,
                displacement_sq,
            }
        })
        .collect();
    Some(MergeEvent {
        round: t,
        alpha,
        layers,
    })
}
