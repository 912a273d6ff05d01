use super::kernels;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Silu(Var),
    RmsNorm { x: Var, g: Var, inv_rms: Vec<T> },
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterAddRows { x: Var, rows: Vec<usize> },
    GatherFlat { x: Var, idx: Vec<usize> },
    RowScale { x: Var, w: Var },
    RowMul { x: Var, v: Var },
    Sum(Var),
    Mean(Var),
    TopKGate { probs: Var, selected: Vec<usize>, k: usize, renorm: bool },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of primitive applications. Backward walks it in exact
/// reverse order of recording.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]. Entries are `None` for values with no
/// dependence on any parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError
where
    T: Scalar,
{
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient is ever recorded for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let out = av.matmul(bv)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[m×n] · b[k×n]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let (m, n) = av.dims2("matmul_bt")?;
        let (k, n2) = bv.dims2("matmul_bt")?;
        if n != n2 {
            return Err(shape_err("matmul_bt", av, bv));
        }
        let mut out = vec![T::zero(); m * k];
        kernels::matmul_bt(av.data(), bv.data(), m, n, k, &mut out);
        let out = Tensor::new(vec![m, k], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|&x| x * x).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Square(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|&z| z * kernels::sigmoid(z)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    pub fn rmsnorm(&mut self, x: Var, g: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.check(x)?, self.check(g)?);
        let d = xv.last_dim();
        if gv.rank() != 1 || gv.numel() != d {
            return Err(shape_err("rmsnorm", xv, gv));
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        let dt = T::from_f64(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gg) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * gg;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::RmsNorm { x, g, inv_rms }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let d = xv.last_dim();
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let lse = kernels::logsumexp(row);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - lse).exp();
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// One log-sum-exp per row; output shape `[rows]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let out: Vec<T> = (0..xv.rows()).map(|r| kernels::logsumexp(xv.row(r))).collect();
        let out = Tensor::new(vec![out.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSumExpRows(x), rg))
    }

    /// Selects rows of a 2-D tensor; repeated indices allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.check(x)?;
        let (n, d) = xv.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `out[rows[i]] += x[i]` into a zero tensor with `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let xv = self.check(x)?;
        let (n, d) = xv.dims2("scatter_add_rows")?;
        if n != rows.len() {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                detail: format!("{} rows but {} targets", n, rows.len()),
            });
        }
        let mut out = vec![T::zero(); out_rows * d];
        for (i, &r) in rows.iter().enumerate() {
            if r >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: r,
                    bound: out_rows,
                });
            }
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(xv.row(i)) {
                *o = *o + v;
            }
        }
        let out = Tensor::new(vec![out_rows, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks flat (row-major) elements; output shape `[idx.len()]`.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.check(x)?;
        let n = xv.numel();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_flat",
                    index: i,
                    bound: n,
                });
            }
            out.push(xv.data()[i]);
        }
        let out = Tensor::new(vec![idx.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherFlat {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Scales row `i` of `x[n×d]` by `w[i]`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.check(x)?, self.check(w)?);
        let (n, d) = xv.dims2("row_scale")?;
        if wv.numel() != n {
            return Err(shape_err("row_scale", xv, wv));
        }
        let mut out = xv.data().to_vec();
        for (i, &s) in wv.data().iter().enumerate() {
            for o in &mut out[i * d..(i + 1) * d] {
                *o = *o * s;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::RowScale { x, w }, rg))
    }

    /// Multiplies every row of `x[..×d]` elementwise by the vector `v[d]`.
    pub fn row_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.check(x)?, self.check(v)?);
        let d = xv.last_dim();
        if vv.rank() != 1 || vv.numel() != d {
            return Err(shape_err("row_mul", xv, vv));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &s) in row.iter_mut().zip(vv.data()) {
                *o = *o * s;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::RowMul { x, v }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let s: T = xv.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::from_f64(xv.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Gate weights for already-chosen experts. `selected` holds `k` expert
    /// indices per row of `probs[T×M]`; output is `[T×k]`. With `renorm`
    /// the selected weights of each row sum to one.
    pub fn topk_gate(&mut self, probs: Var, selected: &[usize], k: usize, renorm: bool) -> Result<Var> {
        let pv = self.check(probs)?;
        let (t, m) = pv.dims2("topk_gate")?;
        if selected.len() != t * k {
            return Err(TensorError::Invalid {
                op: "topk_gate",
                detail: format!("expected {} selections, got {}", t * k, selected.len()),
            });
        }
        let mut out = Vec::with_capacity(t * k);
        for r in 0..t {
            let row = pv.row(r);
            let sel = &selected[r * k..(r + 1) * k];
            if let Some(&bad) = sel.iter().find(|&&j| j >= m) {
                return Err(TensorError::IndexOutOfRange {
                    op: "topk_gate",
                    index: bad,
                    bound: m,
                });
            }
            let denom = if renorm {
                sel.iter().map(|&j| row[j]).sum::<T>()
            } else {
                T::one()
            };
            out.extend(sel.iter().map(|&j| row[j] / denom));
        }
        let out = Tensor::new(vec![t, k], out)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::TopKGate {
                probs,
                selected: selected.to_vec(),
                k,
                renorm,
            },
            rg,
        ))
    }

    pub fn swiglu(&mut self, x: Var, wg: Var, wu: Var, wd: Var) -> Result<Var> {
        let gate = self.matmul(x, wg)?;
        let gate = self.silu(gate)?;
        let up = self.matmul(x, wu)?;
        let h = self.mul(gate, up)?;
        self.matmul(h, wd)
    }

    /// Returns `(mean cross-entropy, per-row log-sum-exp)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Var)> {
        let lv = self.check(logits)?;
        let (b, v) = lv.dims2("softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                detail: format!("{} rows but {} targets", b, targets.len()),
            });
        }
        let mut flat = Vec::with_capacity(b);
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            flat.push(r * v + t);
        }
        let lse = self.logsumexp_rows(logits)?;
        let picked = self.gather_flat(logits, &flat)?;
        let nll = self.sub(lse, picked)?;
        let loss = self.mean(nll)?;
        Ok((loss, lse))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.check(output)?;
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    let ga = acc(grads, *a, av.shape());
                    kernels::matmul_bt(dy.data(), bv.data(), m, n, k, ga);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, bv.shape());
                    kernels::matmul_at(av.data(), dy.data(), m, k, n, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                // y[m×k] = a[m×n] · b[k×n]ᵀ
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (av.shape()[0], av.shape()[1]);
                let k = bv.shape()[0];
                if wants(*a) {
                    let ga = acc(grads, *a, av.shape());
                    kernels::matmul(dy.data(), bv.data(), m, k, n, ga);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, bv.shape());
                    kernels::matmul_at(dy.data(), av.data(), m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let g = acc(grads, v, dy.shape());
                        axpy(g, dy.data(), T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(acc(grads, *a, dy.shape()), dy.data(), T::one());
                }
                if wants(*b) {
                    axpy(acc(grads, *b, dy.shape()), dy.data(), -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let g = acc(grads, *a, av.shape());
                    for ((g, &d), &o) in g.iter_mut().zip(dy.data()).zip(bv.data()) {
                        *g = *g + d * o;
                    }
                }
                if wants(*b) {
                    let g = acc(grads, *b, bv.shape());
                    for ((g, &d), &o) in g.iter_mut().zip(dy.data()).zip(av.data()) {
                        *g = *g + d * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(acc(grads, *a, dy.shape()), dy.data(), *c);
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    let av = val(*a);
                    let two = T::from_f64(2.0);
                    let g = acc(grads, *a, av.shape());
                    for ((g, &d), &x) in g.iter_mut().zip(dy.data()).zip(av.data()) {
                        *g = *g + two * x * d;
                    }
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let av = val(*a);
                    let g = acc(grads, *a, av.shape());
                    for ((g, &d), &z) in g.iter_mut().zip(dy.data()).zip(av.data()) {
                        let s = kernels::sigmoid(z);
                        *g = *g + d * s * (T::one() + z * (T::one() - s));
                    }
                }
            }
            Op::RmsNorm { x, g, inv_rms } => {
                let (xv, gv) = (val(*x), val(*g));
                let d = xv.last_dim();
                let dt = T::from_f64(d as f64);
                if wants(*x) {
                    let gx = acc(grads, *x, xv.shape());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let dr = &dy.data()[r * d..(r + 1) * d];
                        let dot: T = dr
                            .iter()
                            .zip(gv.data())
                            .zip(xr)
                            .map(|((&dd, &gg), &xx)| dd * gg * xx)
                            .sum();
                        let coef = inv * inv * inv * dot / dt;
                        for (((o, &dd), &gg), &xx) in
                            gx[r * d..(r + 1) * d].iter_mut().zip(dr).zip(gv.data()).zip(xr)
                        {
                            *o = *o + inv * dd * gg - xx * coef;
                        }
                    }
                }
                if wants(*g) {
                    let gg = acc(grads, *g, gv.shape());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let dr = &dy.data()[r * d..(r + 1) * d];
                        for ((o, &dd), &xx) in gg.iter_mut().zip(dr).zip(xr) {
                            *o = *o + dd * xx * inv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let d = y.last_dim();
                    let gx = acc(grads, *x, y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = &dy.data()[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &dd) in gx[r * d..(r + 1) * d].iter_mut().zip(yr).zip(dr) {
                            *o = *o + yy * (dd - dot);
                        }
                    }
                }
            }
            Op::LogSumExpRows(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = xv.last_dim();
                    let gx = acc(grads, *x, xv.shape());
                    for r in 0..xv.rows() {
                        let lse = node.value.data()[r];
                        let dr = dy.data()[r];
                        for (o, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(xv.row(r)) {
                            *o = *o + dr * (v - lse).exp();
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = xv.last_dim();
                    let gx = acc(grads, *x, xv.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * d..(r + 1) * d], &dy.data()[i * d..(i + 1) * d], T::one());
                    }
                }
            }
            Op::ScatterAddRows { x, rows } => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = xv.last_dim();
                    let gx = acc(grads, *x, xv.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[i * d..(i + 1) * d], &dy.data()[r * d..(r + 1) * d], T::one());
                    }
                }
            }
            Op::GatherFlat { x, idx } => {
                if wants(*x) {
                    let xv = val(*x);
                    let gx = acc(grads, *x, xv.shape());
                    for (&i, &d) in idx.iter().zip(dy.data()) {
                        gx[i] = gx[i] + d;
                    }
                }
            }
            Op::RowScale { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let d = xv.last_dim();
                if wants(*x) {
                    let gx = acc(grads, *x, xv.shape());
                    for (i, &s) in wv.data().iter().enumerate() {
                        axpy(&mut gx[i * d..(i + 1) * d], &dy.data()[i * d..(i + 1) * d], s);
                    }
                }
                if wants(*w) {
                    let gw = acc(grads, *w, wv.shape());
                    for (i, o) in gw.iter_mut().enumerate() {
                        let dot: T = xv
                            .row(i)
                            .iter()
                            .zip(&dy.data()[i * d..(i + 1) * d])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        *o = *o + dot;
                    }
                }
            }
            Op::RowMul { x, v } => {
                let (xv, vv) = (val(*x), val(*v));
                let d = xv.last_dim();
                if wants(*x) {
                    let gx = acc(grads, *x, xv.shape());
                    for (grow, drow) in gx.chunks_mut(d).zip(dy.data().chunks(d)) {
                        for ((o, &dd), &s) in grow.iter_mut().zip(drow).zip(vv.data()) {
                            *o = *o + dd * s;
                        }
                    }
                }
                if wants(*v) {
                    let gv = acc(grads, *v, vv.shape());
                    for (xrow, drow) in xv.data().chunks(d).zip(dy.data().chunks(d)) {
                        for ((o, &dd), &xx) in gv.iter_mut().zip(drow).zip(xrow) {
                            *o = *o + dd * xx;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = dy.item();
                    for o in acc(grads, *x, xv.shape()) {
                        *o = *o + d;
                    }
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = dy.item() / T::from_f64(xv.numel() as f64);
                    for o in acc(grads, *x, xv.shape()) {
                        *o = *o + d;
                    }
                }
            }
            Op::TopKGate {
                probs,
                selected,
                k,
                renorm,
            } => {
                if wants(*probs) {
                    let pv = val(*probs);
                    let m = pv.last_dim();
                    let w = &node.value;
                    let gp = acc(grads, *probs, pv.shape());
                    for r in 0..pv.rows() {
                        let sel = &selected[r * k..(r + 1) * k];
                        let dr = &dy.data()[r * k..(r + 1) * k];
                        if *renorm {
                            let row = pv.row(r);
                            let denom: T = sel.iter().map(|&j| row[j]).sum();
                            let wr = w.row(r);
                            let dot: T = dr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                            for (&j, &dd) in sel.iter().zip(dr) {
                                gp[r * m + j] = gp[r * m + j] + (dd - dot) / denom;
                            }
                        } else {
                            for (&j, &dd) in sel.iter().zip(dr) {
                                gp[r * m + j] = gp[r * m + j] + dd;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}
