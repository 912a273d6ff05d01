use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spes_core::model::{
    loss_and_grads, model_loss, moe_forward, param_partition, route, routing_trace, upcycle_from_dense, Batch,
    BlockId, LossFunction, ModelConfig, ModelParams, UpcycleSpec,
};
use spes_core::tensor::{grad_check, Tensor};

fn config(layers: usize, experts: usize, active: usize, renorm: bool) -> ModelConfig {
    ModelConfig {
        vocab: 9,
        hidden: 4,
        intermediate: 6,
        layers,
        experts,
        active,
        renormalize_after_topk: renorm,
        tied_head: false,
        coefficients: Default::default(),
    }
}

fn random_batch(rows: usize, width: usize, vocab: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..rows * width).map(|_| rng.random_range(0..vocab as u32)).collect();
    Batch::new(rows, width, tokens).unwrap()
}

// Plain f64 re-implementation of the forward pass, used as the oracle.

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn rms(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, &g)| v / s * g as f64).collect()
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn expert(x: &[f64], e: &spes_core::model::ExpertParams) -> Vec<f64> {
    let xm = vec![x.to_vec()];
    let g = mm(&xm, &mat(&e.wg))[0].clone();
    let u = mm(&xm, &mat(&e.wu))[0].clone();
    let a: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
    mm(&vec![a], &mat(&e.wd))[0].clone()
}

fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `(total, ce, lb, moe_z, z)` and the per-layer MoE output of position 0.
fn oracle_loss(p: &ModelParams, batch: &Batch) -> [f64; 5] {
    let c = &p.config;
    let w = batch.width();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for seq in batch.tokens().chunks(w) {
        inputs.extend(seq[..w - 1].iter().map(|&t| t as usize));
        targets.extend(seq[1..].iter().map(|&t| t as usize));
    }
    let n = inputs.len() as f64;
    let embed = mat(&p.shared.embed);
    let mut x: Mat = inputs.iter().map(|&t| embed[t].clone()).collect();
    let (mut lb, mut mz) = (0.0, 0.0);
    for l in 0..c.layers {
        let h: Mat = x.iter().map(|r| rms(r, p.shared.norms[l].data())).collect();
        let logits = mm(&h, &mat(&p.shared.routers[l]));
        let mut f = vec![0.0; c.experts];
        let mut pm = vec![0.0; c.experts];
        for (t, lg) in logits.iter().enumerate() {
            let z = lse(lg);
            mz += z * z / n;
            let probs: Vec<f64> = lg.iter().map(|v| (v - z).exp()).collect();
            let sel = top_k(&probs, c.active);
            let norm: f64 = if c.renormalize_after_topk { sel.iter().map(|&j| probs[j]).sum() } else { 1.0 };
            for &j in &sel {
                f[j] += 1.0 / (n * c.active as f64);
                let y = expert(&h[t], &p.experts[l][j]);
                for (xv, yv) in x[t].iter_mut().zip(y) {
                    *xv += probs[j] / norm * yv;
                }
            }
            for j in 0..c.experts {
                pm[j] += probs[j] / n;
            }
        }
        lb += c.experts as f64 * f.iter().zip(&pm).map(|(a, b)| a * b).sum::<f64>();
    }
    let lf = c.layers as f64;
    let (lb, mz) = (lb / lf, mz / lf);
    let y: Mat = x.iter().map(|r| rms(r, p.shared.final_norm.data())).collect();
    let logits = mm(&y, &mat(p.shared.head.as_ref().unwrap()));
    let (mut ce, mut z) = (0.0, 0.0);
    for (lg, &t) in logits.iter().zip(&targets) {
        let s = lse(lg);
        ce += (s - lg[t]) / n;
        z += s * s / n;
    }
    let k = c.coefficients;
    let total = k.ce as f64 * ce + k.lb as f64 * lb + k.moe_z as f64 * mz + k.z as f64 * z;
    [total, ce, lb, mz, z]
}

#[test]
fn loss_matches_independent_oracle() {
    // the smallest instance: one layer, one sequence, two predicted positions
    let p = ModelParams::init(&config(1, 4, 2, false), 5).unwrap();
    let batch = Batch::new(1, 3, vec![1, 7, 3]).unwrap();
    let got = model_loss(&p, &batch).unwrap();
    let want = oracle_loss(&p, &batch);
    let k = p.config.coefficients;
    let recomposed = got.ce + 0.01 * got.lb + 0.001 * got.moe_z + 1e-5 * got.z;
    assert_eq!((k.ce, k.lb, k.moe_z, k.z), (1.0, 0.01, 0.001, 1e-5));
    assert!((got.total - recomposed).abs() < 1e-6);
    assert!((got.total - want[0]).abs() < 1e-6, "{got:?} vs {want:?}");

    for seed in 0..10 {
        let cfg = config(2, 5, 2, seed % 2 == 0);
        let p = ModelParams::init(&cfg, seed).unwrap();
        let batch = random_batch(3, 5, cfg.vocab, seed);
        let got = model_loss(&p, &batch).unwrap();
        let want = oracle_loss(&p, &batch);
        for (g, w) in [got.total, got.ce, got.lb, got.moe_z, got.z].iter().zip(want) {
            assert!((g - w).abs() < 1e-5 * (1.0 + w.abs()), "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn uniform_router_gives_unit_lb_and_log_m_squared_moe_z() {
    let mut p = ModelParams::init(&config(2, 4, 2, true), 1).unwrap();
    for r in &mut p.shared.routers {
        *r = Tensor::zeros(r.shape());
    }
    let b = model_loss(&p, &random_batch(2, 6, 9, 2)).unwrap();
    assert!((b.lb - 1.0).abs() < 1e-6);
    assert!((b.moe_z - 4f64.ln().powi(2)).abs() < 1e-5);
}

#[test]
fn routing_examples() {
    let mut p = ModelParams::init(&config(1, 3, 3, false), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let r = route(&p, &h, 0).unwrap();
    for t in 0..5 {
        let s: f32 = r.weights[t * 3..(t + 1) * 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let mut sel = r.selected_for(t).to_vec();
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2]);
    }
    p.config.renormalize_after_topk = true;
    assert_eq!(route(&p, &h, 0).unwrap().selected, r.selected);
    assert!(route(&p, &h, 1).is_err());
}

#[test]
fn moe_forward_matches_dense_gate_sum() {
    for seed in 0..5 {
        let p = ModelParams::init(&config(1, 4, 2, seed % 2 == 1), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let h = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let y = moe_forward(&p, &h, 0).unwrap();
        let logits = mm(&mat(&h), &mat(&p.shared.routers[0]));
        for t in 0..2 {
            let z = lse(&logits[t]);
            let probs: Vec<f64> = logits[t].iter().map(|v| (v - z).exp()).collect();
            let sel = top_k(&probs, 2);
            let norm: f64 = if p.config.renormalize_after_topk { sel.iter().map(|&j| probs[j]).sum() } else { 1.0 };
            // every expert evaluated, non-selected gates zeroed
            let mut dense = vec![0.0; 4];
            for j in 0..4 {
                let gate = if sel.contains(&j) { probs[j] / norm } else { 0.0 };
                for (d, v) in dense.iter_mut().zip(expert(&mat(&h)[t], &p.experts[0][j])) {
                    *d += gate * v;
                }
            }
            for (a, b) in y.row(t).iter().zip(&dense) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn identical_selected_experts_collapse() {
    let mut p = ModelParams::init(&config(1, 2, 2, false), 3).unwrap();
    p.experts[0][1] = p.experts[0][0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let y = moe_forward(&p, &h, 0).unwrap();
    for t in 0..3 {
        let single = expert(&mat(&h)[t], &p.experts[0][0]);
        for (a, b) in y.row(t).iter().zip(single) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn dropless_routing() {
    let cfg = config(2, 6, 3, true);
    let p = ModelParams::init(&cfg, 4).unwrap();
    let batch = random_batch(4, 8, cfg.vocab, 4);
    for r in routing_trace(&p, &batch).unwrap() {
        assert_eq!(r.tokens(), batch.positions());
        assert_eq!(r.assignment_counts().iter().sum::<usize>(), batch.positions() * 3);
        for t in 0..r.tokens() {
            let mut s = r.selected_for(t).to_vec();
            s.dedup();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let cfg = config(1, 3, 2, true);
        let p = ModelParams::init(&cfg, seed).unwrap();
        let f = LossFunction {
            config: cfg.clone(),
            batch: random_batch(1, 3, cfg.vocab, seed),
        };
        let r = grad_check::<f64, _>(&f, &LossFunction::inputs(&p), 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn frozen_expert_still_shapes_forward_and_gets_no_gradient() {
    let cfg = config(1, 4, 1, true);
    let p = ModelParams::init(&cfg, 2).unwrap();
    let batch = random_batch(2, 6, cfg.vocab, 2);
    let used = routing_trace(&p, &batch).unwrap()[0].selected[0];
    let frozen = |id: BlockId| id.expert_index().is_none_or(|j| j != used);
    let (loss, grads) = loss_and_grads(&p, &batch, &frozen).unwrap();
    assert!(grads.keys().all(|id| id.expert_index() != Some(used)));

    let mut zeroed = p.clone();
    let e = &mut zeroed.experts[0][used];
    for t in [&mut e.wg, &mut e.wu, &mut e.wd] {
        *t = Tensor::zeros(t.shape());
    }
    assert_ne!(model_loss(&zeroed, &batch).unwrap().total, loss.total);
}

#[test]
fn upcycling() {
    let dense_cfg = ModelConfig {
        vocab: 11,
        hidden: 64,
        intermediate: 160,
        layers: 1,
        experts: 1,
        active: 1,
        renormalize_after_topk: false,
        tied_head: false,
        coefficients: Default::default(),
    };
    let dense = ModelParams::init(&dense_cfg, 0).unwrap();
    let spec = UpcycleSpec {
        experts: 4,
        active: 1,
        ..Default::default()
    };
    let up = upcycle_from_dense(&dense, &spec).unwrap();
    assert!(up.config.renormalize_after_topk);
    assert_eq!(up.shared.embed, dense.shared.embed);
    let src = &dense.experts[0][0].wg;
    assert!(src.numel() >= 10_000);
    for j in 0..4 {
        let e = &up.experts[0][j].wg;
        let differing = e.data().iter().zip(src.data()).filter(|(a, b)| a != b).count();
        let frac = differing as f64 / src.numel() as f64;
        assert!((0.45..=0.55).contains(&frac), "replica {j}: {frac}");
    }

    for quiet in [
        UpcycleSpec {
            noise_std: 0.0,
            ..spec
        },
        UpcycleSpec {
            noise_frac: 0.0,
            noise_std: 0.5,
            ..spec
        },
    ] {
        let up = upcycle_from_dense(&dense, &quiet).unwrap();
        assert!(up.experts[0].iter().all(|e| e == &dense.experts[0][0]));
        let batch = random_batch(2, 5, 11, 1);
        let a = model_loss(&dense, &batch).unwrap();
        let b = model_loss(&up, &batch).unwrap();
        assert_eq!(a.ce, b.ce);
    }
    assert!(upcycle_from_dense(&dense, &UpcycleSpec { experts: 1, ..spec }).is_err());
    assert!(upcycle_from_dense(&up, &spec).is_err());
}

#[test]
fn partition_examples() {
    assert_eq!(param_partition(16, 16).unwrap(), (0..16).map(|i| vec![i]).collect::<Vec<_>>());
    let p = param_partition(32, 4).unwrap();
    for (i, s) in p.iter().enumerate() {
        assert_eq!(s, &(8 * i..8 * i + 8).collect::<Vec<_>>());
    }
    assert_eq!(param_partition(5, 2).unwrap(), vec![vec![0, 1, 2], vec![3, 4]]);
    assert!(param_partition(4, 5).is_err());
}

#[test]
fn parameter_counts_from_shapes() {
    let cfg = config(3, 5, 2, true);
    let p = ModelParams::init(&cfg, 0).unwrap();
    let (mut shared, mut experts) = (0, 0);
    for (id, t) in p.blocks() {
        if id.is_shared() {
            shared += t.numel();
        } else {
            experts += t.numel();
        }
    }
    assert_eq!(experts, 3 * 5 * 3 * 4 * 6);
    assert_eq!(experts, cfg.expert_params());
    assert_eq!(shared, cfg.shared_params());
    assert_eq!(p.num_params(), cfg.total_params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn partition_is_disjoint_cover(m in 1usize..64, n in 1usize..64) {
        match param_partition(m, n) {
            Ok(p) => {
                prop_assert_eq!(p.len(), n);
                prop_assert!(p.iter().all(|s| !s.is_empty()));
                let all: Vec<usize> = p.concat();
                prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(n > m || m.div_ceil(m.div_ceil(n)) < n),
        }
    }
}
