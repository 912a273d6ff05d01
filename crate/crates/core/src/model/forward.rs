use std::collections::{BTreeMap, HashMap};

use super::{BlockId, ExpertMatrix, ModelConfig, ModelError, ModelParams, Result, NORM_EPS};
use crate::tensor::{Scalar, ScalarFunction, Tape, Tensor, TensorError, Var};

/// Token matrix of `rows` sequences, each `width = S + 1` tokens long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    rows: usize,
    width: usize,
    tokens: Vec<u32>,
}

impl Batch {
    pub fn new(rows: usize, width: usize, tokens: Vec<u32>) -> Result<Self> {
        if width < 2 {
            return Err(ModelError::Batch("sequences need at least two tokens".into()));
        }
        if rows == 0 || tokens.len() != rows * width {
            return Err(ModelError::Batch(format!(
                "{} tokens do not form {rows}×{width}",
                tokens.len()
            )));
        }
        Ok(Self {
            rows,
            width,
            tokens,
        })
    }

    pub fn from_sequences(seqs: &[&[u32]]) -> Result<Self> {
        let width = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != width) {
            return Err(ModelError::Batch("ragged sequences".into()));
        }
        Self::new(seqs.len(), width, seqs.iter().flat_map(|s| s.iter().copied()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Number of predicted positions, `rows · S`.
    pub fn positions(&self) -> usize {
        self.rows * (self.width - 1)
    }

    fn split(&self, vocab: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(ModelError::TokenOutOfRange { token: bad, vocab });
        }
        let s = self.width - 1;
        let mut inputs = Vec::with_capacity(self.positions());
        let mut targets = Vec::with_capacity(self.positions());
        for seq in self.tokens.chunks(self.width) {
            inputs.extend(seq[..s].iter().map(|&t| t as usize));
            targets.extend(seq[1..].iter().map(|&t| t as usize));
        }
        Ok((inputs, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub ce: f64,
    pub lb: f64,
    pub moe_z: f64,
    pub z: f64,
}

/// Routing of `T` tokens in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub k: usize,
    /// `T·k` expert indices, row-major, in descending probability order.
    pub selected: Vec<usize>,
    /// `T·k` gate weights aligned with `selected`.
    pub weights: Vec<f32>,
    /// `T×M` full softmax probabilities.
    pub probs: Tensor,
    /// `T×M` router logits.
    pub logits: Tensor,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn selected_for(&self, token: usize) -> &[usize] {
        &self.selected[token * self.k..(token + 1) * self.k]
    }

    /// Per-expert count of `(token, slot)` assignments.
    pub fn assignment_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.probs.last_dim()];
        for &j in &self.selected {
            counts[j] += 1;
        }
        counts
    }
}

/// Gradients for trainable blocks only.
pub type ParamGrads = BTreeMap<BlockId, Tensor>;

/// Indices of the `k` largest entries; ties go to the lowest index.
pub(crate) fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

struct LayerOut {
    out: Var,
    probs: Var,
    router_lse: Var,
    selected: Vec<usize>,
    gate: Var,
    logits: Var,
}

fn moe_layer<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    h: Var,
    router: Var,
    experts: &[[Var; 3]],
) -> Result<LayerOut> {
    let k = cfg.active;
    let tokens = tape.value(h).rows();
    let logits = tape.matmul(h, router)?;
    let router_lse = tape.logsumexp_rows(logits)?;
    let probs = tape.softmax_rows(logits)?;
    let mut selected = Vec::with_capacity(tokens * k);
    {
        let pv = tape.value(probs);
        for t in 0..tokens {
            selected.extend(top_k(pv.row(t), k));
        }
    }
    let gate = tape.topk_gate(probs, &selected, k, cfg.renormalize_after_topk)?;

    let mut out: Option<Var> = None;
    for (j, e) in experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut flat = Vec::new();
        for (pos, &sel) in selected.iter().enumerate() {
            if sel == j {
                rows.push(pos / k);
                flat.push(pos);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xs = tape.gather_rows(h, &rows)?;
        let y = tape.swiglu(xs, e[0], e[1], e[2])?;
        let w = tape.gather_flat(gate, &flat)?;
        let y = tape.row_scale(y, w)?;
        let y = tape.scatter_add_rows(y, &rows, tokens)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let out = match out {
        Some(v) => v,
        None => {
            let d = tape.value(h).last_dim();
            tape.constant(Tensor::zeros(&[tokens, d]))
        }
    };
    Ok(LayerOut {
        out,
        probs,
        router_lse,
        selected,
        gate,
        logits,
    })
}

struct Recorded {
    total: Var,
    ce: Var,
    lb: Var,
    moe_z: Var,
    z: Var,
    routing: Vec<LayerOut>,
}

fn record<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &HashMap<BlockId, Var>,
    batch: &Batch,
) -> Result<Recorded> {
    let (inputs, targets) = batch.split(cfg.vocab)?;
    let v = |id: BlockId| -> Result<Var> {
        vars.get(&id)
            .copied()
            .ok_or_else(|| ModelError::UnknownBlock(id.to_string()))
    };
    let eps = T::from_f64(NORM_EPS as f64);
    let m = cfg.experts;
    let n_tok = inputs.len();

    let embed = v(BlockId::Embed)?;
    let mut x = tape.gather_rows(embed, &inputs)?;
    let mut lb_terms = Vec::with_capacity(cfg.layers);
    let mut mz_terms = Vec::with_capacity(cfg.layers);
    let mut routing = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let h = tape.rmsnorm(x, v(BlockId::Norm(layer))?, eps)?;
        let experts: Vec<[Var; 3]> = (0..m)
            .map(|expert| {
                let id = |matrix| BlockId::Expert {
                    layer,
                    expert,
                    matrix,
                };
                Ok([
                    v(id(ExpertMatrix::Gate))?,
                    v(id(ExpertMatrix::Up))?,
                    v(id(ExpertMatrix::Down))?,
                ])
            })
            .collect::<Result<_>>()?;
        let lo = moe_layer(tape, cfg, h, v(BlockId::Router(layer))?, &experts)?;
        x = tape.add(x, lo.out)?;

        // lb = M · Σ_j f_j · P_j with f_j constant and P_j = mean_t probs[t, j]
        let mut counts = vec![0usize; m];
        for &j in &lo.selected {
            counts[j] += 1;
        }
        let scale = m as f64 / (n_tok as f64 * (n_tok * cfg.active) as f64);
        let coef: Vec<T> = counts.iter().map(|&c| T::from_f64(c as f64 * scale)).collect();
        let coef = tape.constant(Tensor::new(vec![m], coef)?);
        let weighted = tape.row_mul(lo.probs, coef)?;
        lb_terms.push(tape.sum(weighted)?);

        let sq = tape.square(lo.router_lse)?;
        mz_terms.push(tape.mean(sq)?);
        routing.push(lo);
    }
    let inv_layers = T::from_f64(1.0 / cfg.layers as f64);
    let lb = sum_vars(tape, &lb_terms)?;
    let lb = tape.scale(lb, inv_layers)?;
    let moe_z = sum_vars(tape, &mz_terms)?;
    let moe_z = tape.scale(moe_z, inv_layers)?;

    let y = tape.rmsnorm(x, v(BlockId::FinalNorm)?, eps)?;
    let logits = if cfg.tied_head {
        tape.matmul_bt(y, embed)?
    } else {
        tape.matmul(y, v(BlockId::Head)?)?
    };
    let (ce, lse) = tape.softmax_cross_entropy(logits, &targets)?;
    let z = tape.square(lse)?;
    let z = tape.mean(z)?;

    let c = cfg.coefficients;
    let mut terms = Vec::with_capacity(4);
    for (var, coef) in [(ce, c.ce), (lb, c.lb), (moe_z, c.moe_z), (z, c.z)] {
        terms.push(tape.scale(var, T::from_f64(coef as f64))?);
    }
    let total = sum_vars(tape, &terms)?;
    Ok(Recorded {
        total,
        ce,
        lb,
        moe_z,
        z,
        routing,
    })
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn bundle<T: Scalar>(tape: &Tape<T>, r: &Recorded) -> LossBundle {
    let g = |v: Var| tape.value(v).item().as_f64();
    LossBundle {
        total: g(r.total),
        ce: g(r.ce),
        lb: g(r.lb),
        moe_z: g(r.moe_z),
        z: g(r.z),
    }
}

fn load<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    trainable: &dyn Fn(BlockId) -> bool,
) -> HashMap<BlockId, Var> {
    params
        .blocks()
        .into_iter()
        .map(|(id, t)| {
            let value = t.cast::<T>();
            let var = if trainable(id) {
                tape.param(value)
            } else {
                tape.constant(value)
            };
            (id, var)
        })
        .collect()
}

/// Loss components in 32-bit arithmetic.
pub fn model_loss(params: &ModelParams, batch: &Batch) -> Result<LossBundle> {
    model_loss_with::<f32>(params, batch)
}

/// Loss components evaluated at precision `T`.
pub fn model_loss_with<T: Scalar>(params: &ModelParams, batch: &Batch) -> Result<LossBundle> {
    let mut tape = Tape::<T>::new();
    let vars = load(&mut tape, params, &|_| false);
    let r = record(&mut tape, &params.config, &vars, batch)?;
    Ok(bundle(&tape, &r))
}

/// Loss and gradients of the total loss for blocks where `trainable` holds.
/// Frozen blocks enter the forward pass as constants and get no gradient.
/// Trainable blocks that did not influence the loss get explicit zeros.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
    trainable: &dyn Fn(BlockId) -> bool,
) -> Result<(LossBundle, ParamGrads)> {
    let mut tape = Tape::<f32>::new();
    let vars = load(&mut tape, params, trainable);
    let r = record(&mut tape, &params.config, &vars, batch)?;
    let losses = bundle(&tape, &r);
    let mut g = tape.backward(r.total)?;
    let mut grads = ParamGrads::new();
    for (id, t) in params.blocks() {
        if trainable(id) {
            let grad = g.take(vars[&id]).unwrap_or_else(|| Tensor::zeros(t.shape()));
            grads.insert(id, grad);
        }
    }
    Ok((losses, grads))
}

/// Per-layer routing of every input position in `batch`.
pub fn routing_trace(params: &ModelParams, batch: &Batch) -> Result<Vec<RoutingDecision>> {
    let mut tape = Tape::<f32>::new();
    let vars = load(&mut tape, params, &|_| false);
    let r = record(&mut tape, &params.config, &vars, batch)?;
    Ok(r.routing
        .iter()
        .map(|lo| decision(&tape, params.config.active, lo))
        .collect())
}

fn decision(tape: &Tape<f32>, k: usize, lo: &LayerOut) -> RoutingDecision {
    RoutingDecision {
        k,
        selected: lo.selected.clone(),
        weights: tape.value(lo.gate).data().to_vec(),
        probs: tape.value(lo.probs).clone(),
        logits: tape.value(lo.logits).clone(),
    }
}

fn check_layer(params: &ModelParams, layer: usize) -> Result<()> {
    if layer >= params.config.layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            layers: params.config.layers,
        });
    }
    Ok(())
}

fn layer_tape(
    params: &ModelParams,
    h: &Tensor,
    layer: usize,
) -> Result<(Tape<f32>, LayerOut)> {
    check_layer(params, layer)?;
    if h.rank() != 2 || h.last_dim() != params.config.hidden {
        return Err(TensorError::ShapeMismatch {
            op: "moe layer input",
            lhs: h.shape().to_vec(),
            rhs: vec![params.config.hidden],
        }
        .into());
    }
    let mut tape = Tape::<f32>::new();
    let hv = tape.constant(h.clone());
    let router = tape.constant(params.shared.routers[layer].clone());
    let experts: Vec<[Var; 3]> = params.experts[layer]
        .iter()
        .map(|e| {
            [
                tape.constant(e.wg.clone()),
                tape.constant(e.wu.clone()),
                tape.constant(e.wd.clone()),
            ]
        })
        .collect();
    let lo = moe_layer(&mut tape, &params.config, hv, router, &experts)?;
    Ok((tape, lo))
}

/// Router decision for hidden states `h[T×d]` at `layer`.
pub fn route(params: &ModelParams, h: &Tensor, layer: usize) -> Result<RoutingDecision> {
    let (tape, lo) = layer_tape(params, h, layer)?;
    Ok(decision(&tape, params.config.active, &lo))
}

/// `Σ_{j selected} G_j(h) · E_j(h)` for every row of `h`, without the residual.
pub fn moe_forward(params: &ModelParams, h: &Tensor, layer: usize) -> Result<Tensor> {
    let (tape, lo) = layer_tape(params, h, layer)?;
    Ok(tape.value(lo.out).clone())
}

/// Total model loss as a [`ScalarFunction`] of all blocks in canonical order,
/// for gradient checking.
pub struct LossFunction {
    pub config: ModelConfig,
    pub batch: Batch,
}

impl ScalarFunction for LossFunction {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var, TensorError> {
        let ids = ModelParams::block_ids(&self.config);
        let vars: HashMap<BlockId, Var> = ids.into_iter().zip(params.iter().copied()).collect();
        match record(tape, &self.config, &vars, &self.batch) {
            Ok(r) => Ok(r.total),
            Err(ModelError::Tensor(e)) => Err(e),
            Err(e) => Err(TensorError::Invalid {
                op: "model loss",
                detail: e.to_string(),
            }),
        }
    }
}

impl LossFunction {
    /// Blocks of `params` in the order [`ScalarFunction::eval`] expects.
    pub fn inputs(params: &ModelParams) -> Vec<Tensor<f64>> {
        params.blocks().into_iter().map(|(_, t)| t.cast()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExpertParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(m: usize, k: usize, renorm: bool) -> ModelConfig {
        ModelConfig {
            vocab: 7,
            hidden: 4,
            intermediate: 5,
            layers: 1,
            experts: m,
            active: k,
            renormalize_after_topk: renorm,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    #[test]
    fn route_two_experts() {
        let c = cfg(2, 1, false);
        let mut p = ModelParams::init(&c, 0).unwrap();
        // h = e0 so logits are the first router row
        p.shared.routers[0] = Tensor::zeros(&[4, 2]);
        p.shared.routers[0].data_mut()[..2].copy_from_slice(&[2.0, -1.0]);
        let h = Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0]]);
        let r = route(&p, &h, 0).unwrap();
        assert_eq!(r.selected, vec![0]);
        let expect = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((r.weights[0] as f64 - expect).abs() < 1e-6);
        assert!((r.weights[0] - 0.9526).abs() < 1e-4);

        p.config.renormalize_after_topk = true;
        let r = route(&p, &h, 0).unwrap();
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn route_ties_pick_lowest_index() {
        let c = cfg(4, 1, false);
        let mut p = ModelParams::init(&c, 0).unwrap();
        p.shared.routers[0] = Tensor::zeros(&[4, 4]);
        let h = Tensor::from_rows(&[&[0.3, -0.2, 0.9, 1.0]]);
        assert_eq!(route(&p, &h, 0).unwrap().selected, vec![0]);
    }

    #[test]
    fn route_all_experts_gives_full_softmax() {
        for renorm in [false, true] {
            let c = cfg(3, 3, renorm);
            let p = ModelParams::init(&c, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let h = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let r = route(&p, &h, 0).unwrap();
            for t in 0..2 {
                let s: f32 = r.weights[t * 3..(t + 1) * 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                let mut sel = r.selected_for(t).to_vec();
                sel.sort();
                assert_eq!(sel, vec![0, 1, 2]);
            }
        }
    }

    #[test]
    fn route_rejects_bad_layer() {
        let p = ModelParams::init(&cfg(2, 1, false), 0).unwrap();
        let h = Tensor::zeros(&[1, 4]);
        assert!(matches!(route(&p, &h, 1), Err(ModelError::LayerOutOfRange { .. })));
    }

    #[test]
    fn single_expert_with_unit_weight() {
        let c = cfg(3, 1, true);
        let p = ModelParams::init(&c, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = route(&p, &h, 0).unwrap();
        let y = moe_forward(&p, &h, 0).unwrap();
        for t in 0..3 {
            let e = &p.experts[0][r.selected[t]];
            let row = Tensor::new(vec![1, 4], h.row(t).to_vec()).unwrap();
            let single = crate::tensor::swiglu_expert(&row, &e.wg, &e.wu, &e.wd).unwrap();
            assert_eq!(y.row(t), single.data());
        }
    }

    #[test]
    fn identical_experts_collapse_to_one() {
        let c = cfg(2, 2, false);
        let mut p = ModelParams::init(&c, 5).unwrap();
        p.experts[0][1] = p.experts[0][0].clone();
        p.config.renormalize_after_topk = true;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let y = moe_forward(&p, &h, 0).unwrap();
        let e = &p.experts[0][0];
        let single = crate::tensor::swiglu_expert(&h, &e.wg, &e.wu, &e.wd).unwrap();
        for (a, b) in y.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_oracle_agrees() {
        // brute force: evaluate every expert on every token, zero the gates
        // of unselected experts, sum in f64
        let c = cfg(4, 2, false);
        let p = ModelParams::init(&c, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let y = moe_forward(&p, &h, 0).unwrap();
        let h64: Tensor<f64> = h.cast();
        let router: Tensor<f64> = p.shared.routers[0].cast();
        let logits = h64.matmul(&router).unwrap();
        for t in 0..2 {
            let row = logits.row(t);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let probs: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let mut out = [0.0f64; 4];
            for j in 0..4 {
                let gate = if order[..2].contains(&j) { probs[j] } else { 0.0 };
                let e: &ExpertParams = &p.experts[0][j];
                let x = Tensor::new(vec![1, 4], h64.row(t).to_vec()).unwrap();
                let ey = crate::tensor::swiglu_expert(&x, &e.wg.cast(), &e.wu.cast(), &e.wd.cast())
                    .unwrap();
                for (o, v) in out.iter_mut().zip(ey.data()) {
                    *o += gate * v;
                }
            }
            for (a, b) in y.row(t).iter().zip(out) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_routing_has_unit_lb_and_known_moe_z() {
        let c = cfg(4, 2, false);
        let mut p = ModelParams::init(&c, 1).unwrap();
        p.shared.routers[0] = Tensor::zeros(&[4, 4]);
        // every token identical routing would pick {0,1}; use k = M instead
        p.config.active = 4;
        let b = Batch::from_sequences(&[&[1, 2, 3, 4, 5]]).unwrap();
        let l = model_loss(&p, &b).unwrap();
        assert!((l.lb - 1.0).abs() < 1e-6, "{}", l.lb);
        assert!((l.moe_z - 4f64.ln().powi(2)).abs() < 1e-5);
    }

    #[test]
    fn token_out_of_range_rejected() {
        let p = ModelParams::init(&cfg(2, 1, false), 0).unwrap();
        let b = Batch::from_sequences(&[&[1, 7]]).unwrap();
        assert!(matches!(
            model_loss(&p, &b),
            Err(ModelError::TokenOutOfRange { token: 7, vocab: 7 })
        ));
    }

    #[test]
    fn frozen_blocks_get_no_gradients() {
        let c = cfg(3, 2, false);
        let p = ModelParams::init(&c, 3).unwrap();
        let b = Batch::from_sequences(&[&[1, 2, 3, 4], &[0, 6, 5, 2]]).unwrap();
        let (_, g) = loss_and_grads(&p, &b, &|id| id.expert_index() != Some(1)).unwrap();
        assert!(g.keys().all(|id| id.expert_index() != Some(1)));
        assert_eq!(g.len(), ModelParams::block_ids(&c).len() - 3);
    }
}
