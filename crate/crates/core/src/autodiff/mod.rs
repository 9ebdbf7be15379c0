//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends one node whose inputs have
//! strictly smaller indices, so creation order is a topological order and
//! [`Graph::backward`] simply walks the tape in reverse. Graphs are rebuilt
//! for every training step.

pub mod gradcheck;
mod kernel;

use kernel::{gemm, Operand};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleColumns {
        x: Var,
        mask: Var,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1(Var),
    Sum(Var),
    Mean(Var),
    Std(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleColumns { .. } => "scale_columns",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1(_) => "l1_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Std(_) => "std",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

/// A dynamically built computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        let grad = match (&op, requires) {
            (Op::Leaf, true) => Some(vec![0.0; value.len()]),
            _ => None,
        };
        self.values.push(value);
        self.grads.push(grad);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.ops[v.0].tag()
    }

    /// Overwrites a leaf's value; shape must be unchanged.
    pub fn set_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        if self.values[v.0].shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: self.values[v.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[v.0] = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let ((m, k), (k2, n)) = (as_matrix(ta), as_matrix(tb));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::new(ta.data(), m, k),
            Operand::new(tb.data(), k, n),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), r))
    }

    /// `x · wᵀ + b` with `x: [r, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        let ((r, inp), (out_f, inp2)) = (as_matrix(tx), as_matrix(tw));
        if tw.shape().len() != 2 || inp != inp2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; r * out_f];
        if let Some(bv) = b {
            let tb = &self.values[bv.0];
            if tb.len() != out_f {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: tw.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(
            Operand::new(tx.data(), r, inp),
            Operand::new(tw.data(), out_f, inp).t(),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let value = Tensor::new(vec![r, out_f], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rq = self.req(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rq))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), r))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(value, Op::Scale(a, c), r))
    }

    /// Multiplies column `j` of `x: [r, c]` by `mask[j % w]`, where `w` is the
    /// mask length and `c` a multiple of it: one mask shared by every block of
    /// `w` columns (every head).
    pub fn scale_columns(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (tx, tm) = (&self.values[x.0], &self.values[mask.0]);
        let w = tm.len();
        if tm.shape().len() != 1 || tx.cols() % w != 0 {
            return Err(Error::ShapeMismatch {
                op: "scale_columns",
                lhs: tx.shape().to_vec(),
                rhs: tm.shape().to_vec(),
            });
        }
        let m = tm.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(tx.cols()) {
            for block in row.chunks_mut(w) {
                block.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let r = self.req(&[x, mask]);
        Ok(self.push(value, Op::ScaleColumns { x, mask }, r))
    }

    /// Softmax along the last dimension, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        if !ta.is_finite() {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(ta.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(value, Op::Softmax(a), r))
    }

    /// Per-row layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rq = self.req(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rq,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(value, Op::Gelu(a), r))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [batch·nq, heads·dh]`, `k, v: [batch·nk, heads·dh]`. Head `h` owns
    /// columns `h·dh .. (h+1)·dh`. Output has the shape of `q`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        self.same_shape("attention k/v", k, v)?;
        let (tq, tk, tv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let width = tq.cols();
        if batch == 0
            || heads == 0
            || width != tk.cols()
            || width % heads != 0
            || tq.rows() % batch != 0
            || tk.rows() % batch != 0
        {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (nq, nk, dh) = (tq.rows() / batch, tk.rows() / batch, width / heads);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; tq.rows() * width];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * nq * nk..][..nq * nk];
                for i in 0..nq {
                    let qi = &qd[(b * nq + i) * width + h * dh..][..dh];
                    let prow = &mut p[i * nk..][..nk];
                    for (j, s) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * nk + j) * width + h * dh..][..dh];
                        *s = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * nq + i) * width + h * dh..][..dh];
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vd[(b * nk + j) * width + h * dh..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                    }
                }
            }
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("attention output".into()));
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        let r = self.req(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                scale,
                probs,
            },
            r,
        ))
    }

    /// Mean softmax cross-entropy of `logits: [n, classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.values[logits.0];
        let (n, c) = as_matrix(tl);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        if !tl.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / n as f64);
        let rq = self.req(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rq,
        ))
    }

    /// Sum of absolute values. The derivative at exactly zero is taken as 0.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].data().iter().map(|x| x.abs()).sum();
        let r = self.req(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::L1(a), r))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].data().iter().sum();
        let r = self.req(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), r))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let r = self.req(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), r))
    }

    /// Population standard deviation over all entries.
    pub fn std(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let n = t.len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let s = (t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        let r = self.req(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Std(a), r))
    }

    /// Looks up rows of `table: [vocab, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.values[table.0];
        let (vocab, dim) = as_matrix(tt);
        if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let value = tt.select_rows(ids);
        debug_assert_eq!(value.cols(), dim);
        let r = self.req(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            r,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.shape().len() != 2 || rows.iter().any(|&r| r >= tx.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let value = tx.select_rows(rows);
        let r = self.req(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            r,
        ))
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        for i in 0..self.values.len() {
            if self.requires[i] && !matches!(self.ops[i], Op::Leaf) {
                self.grads[i] = Some(vec![0.0; self.values[i].len()]);
            }
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().expect("gradient buffer");
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Graph {
            values,
            grads,
            requires,
            ops,
        } = self;
        macro_rules! with_grad {
            ($v:expr, |$gb:ident| $body:expr) => {
                if requires[$v.0] {
                    if let Some($gb) = grads[$v.0].as_deref_mut() {
                        $body;
                    }
                }
            };
        }
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                let ((m, k), (_, n)) = (as_matrix(ta), as_matrix(tb));
                let go = Operand::new(g, m, n);
                with_grad!(*a, |ga| gemm(go, Operand::new(tb.data(), k, n).t(), ga, 1.0));
                with_grad!(*b, |gb| gemm(Operand::new(ta.data(), m, k).t(), go, gb, 1.0));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&values[x.0], &values[w.0]);
                let ((r, inp), (out_f, _)) = (as_matrix(tx), as_matrix(tw));
                let go = Operand::new(g, r, out_f);
                with_grad!(*x, |gx| gemm(go, Operand::new(tw.data(), out_f, inp), gx, 1.0));
                with_grad!(*w, |gw| gemm(go.t(), Operand::new(tx.data(), r, inp), gw, 1.0));
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for row in g.chunks(out_f) {
                            gb.iter_mut().zip(row).for_each(|(a, c)| *a += c);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                with_grad!(*a, |ga| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gy * bv;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::ScaleColumns { x, mask } => {
                let (tx, tm) = (&values[x.0], &values[mask.0]);
                let (w, cols) = (tm.len(), tx.cols());
                let m = tm.data();
                with_grad!(*x, |gx| {
                    for (grow, gyrow) in gx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for (gb, gyb) in grow.chunks_mut(w).zip(gyrow.chunks(w)) {
                            for j in 0..w {
                                gb[j] += gyb[j] * m[j];
                            }
                        }
                    }
                });
                with_grad!(*mask, |gm| {
                    for (xrow, gyrow) in tx.data().chunks(cols).zip(g.chunks(cols)) {
                        for (xb, gyb) in xrow.chunks(w).zip(gyrow.chunks(w)) {
                            for j in 0..w {
                                gm[j] += gyb[j] * xb[j];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &values[i];
                let c = y.cols();
                with_grad!(*a, |ga| {
                    for ((garow, yrow), gyrow) in
                        ga.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c))
                    {
                        let dot: f64 = yrow.iter().zip(gyrow).map(|(p, d)| p * d).sum();
                        for j in 0..c {
                            garow[j] += yrow[j] * (gyrow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = &values[gamma.0];
                let c = tg.len();
                with_grad!(*gamma, |gg| {
                    for (h, gy) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gy[j] * h[j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for gy in g.chunks(c) {
                        gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                });
                with_grad!(*x, |gx| {
                    let mut dh = vec![0.0; c];
                    for (r, (gxr, gy)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let h = &xhat[r * c..][..c];
                        for j in 0..c {
                            dh[j] = gy[j] * tg.data()[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gxr[j] += inv_std[r] * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = &values[a.0];
                with_grad!(*a, |ga| {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *x += gy * gelu_grad(*av);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                scale,
                probs,
            } => {
                let (tq, tk, tv) = (&values[q.0], &values[k.0], &values[v.0]);
                let width = tq.cols();
                let (nq, nk, dh) = (tq.rows() / batch, tk.rows() / batch, width / heads);
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dv = vec![0.0; tv.len()];
                let mut ds = vec![0.0; nk];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * nq * nk..][..nq * nk];
                        for i in 0..nq {
                            let go = &g[(b * nq + i) * width + h * dh..][..dh];
                            let prow = &p[i * nk..][..nk];
                            let mut dot = 0.0;
                            for j in 0..nk {
                                let off = (b * nk + j) * width + h * dh;
                                let vj = &tv.data()[off..][..dh];
                                let dp: f64 = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                ds[j] = dp;
                                dot += prow[j] * dp;
                                let dvj = &mut dv[off..][..dh];
                                dvj.iter_mut().zip(go).for_each(|(x, o)| *x += prow[j] * o);
                            }
                            let qoff = (b * nq + i) * width + h * dh;
                            for j in 0..nk {
                                let s = prow[j] * (ds[j] - dot) * scale;
                                let off = (b * nk + j) * width + h * dh;
                                for c in 0..dh {
                                    dq[qoff + c] += s * tk.data()[off + c];
                                    dk[off + c] += s * tq.data()[qoff + c];
                                }
                            }
                        }
                    }
                }
                with_grad!(*q, |gq| gq.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
                with_grad!(*k, |gk| gk.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
                with_grad!(*v, |gv| gv.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                with_grad!(*logits, |gl| {
                    for r in 0..n {
                        for j in 0..c {
                            let y = if labels[r] == j { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - y);
                        }
                    }
                });
            }
            Op::L1(a) => {
                let ta = &values[a.0];
                with_grad!(*a, |ga| {
                    for (x, v) in ga.iter_mut().zip(ta.data()) {
                        if *v > 0.0 {
                            *x += g[0];
                        } else if *v < 0.0 {
                            *x -= g[0];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = values[a.0].len() as f64;
                with_grad!(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Std(a) => {
                let ta = &values[a.0];
                let s = values[i].data()[0];
                let n = ta.len() as f64;
                let m = ta.data().iter().sum::<f64>() / n;
                if s > 0.0 {
                    with_grad!(*a, |ga| {
                        for (x, v) in ga.iter_mut().zip(ta.data()) {
                            *x += g[0] * (v - m) / (n * s);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let dim = values[table.0].cols();
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..][..dim];
                        gt[id * dim..][..dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let dim = values[x.0].cols();
                with_grad!(*x, |gx| {
                    for (r, &src_row) in rows.iter().enumerate() {
                        gx[src_row * dim..][..dim]
                            .iter_mut()
                            .zip(&g[r * dim..][..dim])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
    }
}
