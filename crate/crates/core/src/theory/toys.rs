use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{sq_norm, Layout, Objective};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// `f_i(θ) = ½ Σ_k a_k (θ_k − c_{ik})²` with additive Gaussian gradient
/// noise of per-coordinate standard deviation `noise`.
#[derive(Debug, Clone)]
pub struct QuadraticToy {
    layout: Layout,
    curvature: Vec<f64>,
    centers: Vec<Vec<f64>>,
    noise: f64,
}

impl QuadraticToy {
    pub fn with_centers(layout: Layout, curvature: Vec<f64>, centers: Vec<Vec<f64>>, noise: f64) -> Self {
        assert_eq!(curvature.len(), layout.dim());
        assert!(centers.iter().all(|c| c.len() == layout.dim()));
        Self {
            layout,
            curvature,
            centers,
            noise,
        }
    }

    /// `½‖θ‖²` on every node, exact gradients.
    pub fn unit(layout: Layout, nodes: usize) -> Self {
        let d = layout.dim();
        Self::with_centers(layout, vec![1.0; d], vec![vec![0.0; d]; nodes], 0.0)
    }

    /// Curvatures uniform in `[lo, hi]`, node centers scattered with
    /// standard deviation `spread` around a common point.
    pub fn random(layout: Layout, nodes: usize, lo: f64, hi: f64, spread: f64, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = layout.dim();
        let curvature = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
        let base = gaussian(&mut rng, d, 1.0);
        let centers = (0..nodes)
            .map(|_| {
                let off = gaussian(&mut rng, d, spread);
                base.iter().zip(off).map(|(b, o)| b + o).collect()
            })
            .collect();
        Self::with_centers(layout, curvature, centers, noise)
    }

    pub fn max_curvature(&self) -> f64 {
        self.curvature.iter().cloned().fold(0.0, f64::max)
    }
}

impl Objective for QuadraticToy {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn nodes(&self) -> usize {
        self.centers.len()
    }

    fn local_loss(&self, node: usize, theta: &[f64]) -> f64 {
        let c = &self.centers[node];
        0.5 * (0..theta.len())
            .map(|k| self.curvature[k] * (theta[k] - c[k]).powi(2))
            .sum::<f64>()
    }

    fn local_grad(&self, node: usize, theta: &[f64]) -> Vec<f64> {
        let c = &self.centers[node];
        (0..theta.len()).map(|k| self.curvature[k] * (theta[k] - c[k])).collect()
    }

    fn sample_grad(&self, node: usize, theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut g = self.local_grad(node, theta);
        if self.noise > 0.0 {
            for (x, e) in g.iter_mut().zip(gaussian(rng, theta.len(), self.noise)) {
                *x += e;
            }
        }
        g
    }

    /// Exact minimum: the spread of node centers around their mean.
    fn lower_bound(&self) -> f64 {
        let n = self.centers.len() as f64;
        let d = self.layout.dim();
        let mean: Vec<f64> = (0..d)
            .map(|k| self.centers.iter().map(|c| c[k]).sum::<f64>() / n)
            .collect();
        self.loss(&mean)
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        gaussian(rng, self.layout.dim(), 1.0)
    }
}

#[derive(Debug, Clone)]
struct Sample {
    x: Vec<f64>,
    y: f64,
    expert: usize,
}

/// L2-regularized logistic regression whose logit is `x·(w_ψ + w_j)`, with
/// `j` the expert a sample is routed to. Stochastic gradients use
/// minibatches drawn with replacement from each node's finite shard.
#[derive(Debug, Clone)]
pub struct LogisticToy {
    layout: Layout,
    features: usize,
    shards: Vec<Vec<Sample>>,
    batch: usize,
    l2: f64,
    lower: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticSpec {
    pub features: usize,
    pub experts: usize,
    pub nodes: usize,
    pub per_node: usize,
    /// Probability a node's label is forced to its own class
    /// (`+1` on even nodes, `−1` on odd ones).
    pub label_skew: f64,
    /// Every node gets a copy of node 0's shard.
    pub identical_shards: bool,
    pub batch: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogisticSpec {
    fn default() -> Self {
        Self {
            features: 4,
            experts: 4,
            nodes: 2,
            per_node: 64,
            label_skew: 0.0,
            identical_shards: false,
            batch: 4,
            l2: 0.05,
            seed: 0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^{−m})`, stable for large `|m|`.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

impl LogisticToy {
    pub fn new(spec: LogisticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let p = spec.features;
        let layout = Layout::new(p, spec.experts, p);
        let w_shared = gaussian(&mut rng, p, 1.0);
        let w_expert: Vec<Vec<f64>> = (0..spec.experts).map(|_| gaussian(&mut rng, p, 1.0)).collect();
        let centers: Vec<Vec<f64>> = (0..spec.experts).map(|_| gaussian(&mut rng, p, 1.0)).collect();
        let mut shards: Vec<Vec<Sample>> = (0..spec.nodes)
            .map(|node| {
                (0..spec.per_node)
                    .map(|_| {
                        let expert = rng.random_range(0..spec.experts);
                        let x: Vec<f64> = centers[expert]
                            .iter()
                            .zip(gaussian(&mut rng, p, 1.0))
                            .map(|(c, e)| c + e)
                            .collect();
                        let z: f64 = (0..p).map(|k| x[k] * (w_shared[k] + w_expert[expert][k])).sum();
                        let y = if rng.random::<f64>() < spec.label_skew {
                            if node % 2 == 0 {
                                1.0
                            } else {
                                -1.0
                            }
                        } else if rng.random::<f64>() < sigmoid(z) {
                            1.0
                        } else {
                            -1.0
                        };
                        Sample { x, y, expert }
                    })
                    .collect()
            })
            .collect();
        if spec.identical_shards {
            let first = shards[0].clone();
            shards.iter_mut().for_each(|s| *s = first.clone());
        }
        let mut toy = Self {
            layout,
            features: p,
            shards,
            batch: spec.batch.max(1),
            l2: spec.l2,
            lower: f64::NEG_INFINITY,
        };
        toy.lower = toy.certified_lower_bound();
        toy
    }

    /// Upper bound on the smoothness constant of every `f_i`.
    pub fn smoothness_bound(&self) -> f64 {
        let max_x = self
            .shards
            .iter()
            .flatten()
            .map(|s| sq_norm(&s.x))
            .fold(0.0, f64::max);
        max_x / 2.0 + self.l2
    }

    /// Gradient descent to near-stationarity, then the strong-convexity
    /// certificate `F(θ) − ‖∇F(θ)‖²/(2λ) ≤ inf F`.
    fn certified_lower_bound(&self) -> f64 {
        let step = 1.0 / self.smoothness_bound();
        let mut theta = vec![0.0; self.layout.dim()];
        for _ in 0..20_000 {
            let g = self.grad(&theta);
            if sq_norm(&g) < 1e-24 {
                break;
            }
            for (t, gi) in theta.iter_mut().zip(g) {
                *t -= step * gi;
            }
        }
        self.loss(&theta) - sq_norm(&self.grad(&theta)) / (2.0 * self.l2)
    }

    fn logit(&self, s: &Sample, theta: &[f64]) -> f64 {
        let e = self.layout.expert_range(s.expert).start;
        (0..self.features).map(|k| s.x[k] * (theta[k] + theta[e + k])).sum()
    }

    fn add_sample_grad(&self, s: &Sample, theta: &[f64], scale: f64, g: &mut [f64]) {
        let c = -s.y * sigmoid(-s.y * self.logit(s, theta)) * scale;
        let e = self.layout.expert_range(s.expert).start;
        for k in 0..self.features {
            g[k] += c * s.x[k];
            g[e + k] += c * s.x[k];
        }
    }

    fn finish(&self, theta: &[f64], mut g: Vec<f64>) -> Vec<f64> {
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += self.l2 * t;
        }
        g
    }
}

impl Objective for LogisticToy {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn nodes(&self) -> usize {
        self.shards.len()
    }

    fn local_loss(&self, node: usize, theta: &[f64]) -> f64 {
        let shard = &self.shards[node];
        let data = shard
            .iter()
            .map(|s| softplus_neg(s.y * self.logit(s, theta)))
            .sum::<f64>()
            / shard.len() as f64;
        data + 0.5 * self.l2 * sq_norm(theta)
    }

    fn local_grad(&self, node: usize, theta: &[f64]) -> Vec<f64> {
        let shard = &self.shards[node];
        let mut g = vec![0.0; theta.len()];
        for s in shard {
            self.add_sample_grad(s, theta, 1.0 / shard.len() as f64, &mut g);
        }
        self.finish(theta, g)
    }

    fn sample_grad(&self, node: usize, theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let shard = &self.shards[node];
        let mut g = vec![0.0; theta.len()];
        for _ in 0..self.batch {
            let s = &shard[rng.random_range(0..shard.len())];
            self.add_sample_grad(s, theta, 1.0 / self.batch as f64, &mut g);
        }
        self.finish(theta, g)
    }

    fn lower_bound(&self) -> f64 {
        self.lower
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        gaussian(rng, self.layout.dim(), 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(obj: &dyn Objective, node: usize, theta: &[f64]) {
        let g = obj.local_grad(node, theta);
        for k in 0..theta.len() {
            let (mut a, mut b) = (theta.to_vec(), theta.to_vec());
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (obj.local_loss(node, &a) - obj.local_loss(node, &b)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QuadraticToy::random(Layout::new(3, 2, 2), 2, 0.5, 2.0, 0.3, 0.1, 4);
        let l = LogisticToy::new(LogisticSpec::default());
        for obj in [&q as &dyn Objective, &l] {
            let theta = obj.init(&mut rng);
            for node in 0..obj.nodes() {
                fd_check(obj, node, &theta);
            }
        }
    }

    #[test]
    fn lower_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = QuadraticToy::random(Layout::new(3, 2, 2), 3, 0.5, 2.0, 0.3, 0.0, 4);
        let l = LogisticToy::new(LogisticSpec::default());
        for obj in [&q as &dyn Objective, &l] {
            let lb = obj.lower_bound();
            assert!(lb.is_finite());
            for _ in 0..50 {
                assert!(obj.loss(&obj.init(&mut rng)) >= lb);
            }
        }
        // the certificate is tight once GD has converged
        let mut theta = vec![0.0; l.layout().dim()];
        for _ in 0..20_000 {
            let g = l.grad(&theta);
            theta.iter_mut().zip(g).for_each(|(t, g)| *t -= g / l.smoothness_bound());
        }
        assert!(l.loss(&theta) - l.lower_bound() < 1e-9);
    }

    #[test]
    fn sample_gradients_are_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = LogisticToy::new(LogisticSpec::default());
        let theta = l.init(&mut rng);
        let exact = l.local_grad(0, &theta);
        let reps = 20_000;
        let mut acc = vec![0.0; theta.len()];
        for _ in 0..reps {
            for (a, g) in acc.iter_mut().zip(l.sample_grad(0, &theta, &mut rng)) {
                *a += g / reps as f64;
            }
        }
        let err = acc.iter().zip(&exact).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        assert!(err < 0.02, "max deviation {err}");
    }
}
