//! Forward definitions and backward rules for every tape operation.

use super::tape::{Node, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) struct AttentionCache<S> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<(usize, usize)>,
    /// Row-major `len x len` softmax weights per (segment, head).
    probs: Vec<Vec<S>>,
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    MaskFill(Var, Vec<bool>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    MulRows(Var, Var),
    Pick(Var, Vec<usize>),
    Attention(Box<AttentionCache<S>>),
    /// Scalar output whose gradient w.r.t. `input` was computed during the
    /// forward pass.
    Precomputed {
        input: Var,
        grad: Tensor<S>,
    },
}

impl<S> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddBias(a, b) | Mul(a, b) | MulRows(a, b) => vec![*a, *b],
            Scale(a, _)
            | Gelu(a)
            | Log(a)
            | Exp(a)
            | GatherRows(a, _)
            | ScatterAddRows(a, _)
            | MaskFill(a, _)
            | Transpose(a)
            | Reshape(a)
            | Sum(a)
            | Mean(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Pick(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Attention(c) => vec![c.q, c.k, c.v],
            Precomputed { input, .. } => vec![*input],
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn check_matrix(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(Error::Index { op, index, bound }),
        None => Ok(()),
    }
}

impl<S: Real> Tape<S> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[D]` bias to every row of a `[T x D]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() || tb.shape().len() != 1 {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        let d = tb.numel();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| S::from_f64(gelu_f64(v.as_f64())));
        self.push(out, Op::Gelu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    /// Selects rows `idx` of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = check_matrix("gather_rows", tx)?;
        check_indices("gather_rows", idx, rows)?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec())))
    }

    /// Adds row `r` of `x` into row `idx[r]` of an `[nrows x D]` zero matrix.
    /// Exact adjoint of [`Tape::gather_rows`].
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], nrows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = check_matrix("scatter_add_rows", tx)?;
        if rows != idx.len() {
            return Err(Error::shape("scatter_add_rows", tx.shape(), &[idx.len()]));
        }
        check_indices("scatter_add_rows", idx, nrows)?;
        let mut out = Tensor::zeros(&[nrows, cols]);
        for (r, &i) in idx.iter().enumerate() {
            let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (o, &v) in dst.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(x, idx.to_vec())))
    }

    /// Replaces entries where `mask` is true by `value`; no gradient flows
    /// through replaced entries.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: S) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::shape("mask_fill", tx.shape(), &[mask.len()]));
        }
        let mut out = tx.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *o = value;
            }
        }
        Ok(self.push(out, Op::MaskFill(x, mask.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = check_matrix("transpose", tx)?;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: S = t.data().iter().copied().sum();
        let n = S::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    /// Softmax over the last axis, max-subtracted, accumulated in f64.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.all_finite() {
            // -inf entries from masking are fine as long as each row keeps one
            // finite entry.
            if tx.data().iter().any(|v| v.is_nan() || *v == S::infinity()) {
                return Err(Error::NonFinite("softmax input".into()));
            }
        }
        let cols = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_row_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let cols = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max
                + row
                    .iter()
                    .map(|v| (v.as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            for v in row.iter_mut() {
                *v = S::from_f64(v.as_f64() - lse);
            }
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Row-wise standardization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let tx = self.value(x);
        let (_, d) = check_matrix("layer_norm", tx)?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(S::from_f64(r));
            for (j, v) in row.iter().enumerate() {
                let h = (v.as_f64() - mean) * r;
                xhat.push(S::from_f64(h));
                out.push(S::from_f64(h) * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales row `i` of a `[T x D]` matrix by entry `i` of a length-`T` tensor.
    pub fn mul_rows(&mut self, x: Var, factors: Var) -> Result<Var> {
        let (tx, tf) = (self.value(x), self.value(factors));
        let (rows, cols) = check_matrix("mul_rows", tx)?;
        if tf.numel() != rows {
            return Err(Error::shape("mul_rows", tx.shape(), tf.shape()));
        }
        let mut out = tx.clone();
        for (row, &f) in out.data_mut().chunks_mut(cols).zip(tf.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::MulRows(x, factors)))
    }

    /// Picks entry `idx[i]` from row `i`, giving a length-`T` vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = check_matrix("pick", tx)?;
        if idx.len() != rows {
            return Err(Error::shape("pick", tx.shape(), &[idx.len()]));
        }
        check_indices("pick", idx, cols)?;
        let data = idx.iter().enumerate().map(|(i, &j)| tx.at(i, j)).collect();
        Ok(self.push(Tensor::vector(data), Op::Pick(x, idx.to_vec())))
    }

    /// Multi-head scaled dot-product attention over `[T x D]` projections.
    ///
    /// Rows are partitioned into independent `(start, len)` segments; a query
    /// attends only to keys of its own segment whose `key_mask` entry is true.
    /// Rows outside every segment, and queries with no visible key, produce
    /// zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        key_mask: &[bool],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = check_matrix("attention", tq)?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: {d} columns not divisible into {heads} heads"
            )));
        }
        if key_mask.len() != t {
            return Err(Error::shape("attention", tq.shape(), &[key_mask.len()]));
        }
        if let Some(&(s, l)) = segments.iter().find(|&&(s, l)| s + l > t) {
            return Err(Error::Index {
                op: "attention",
                index: s + l,
                bound: t,
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![S::zero(); t * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![S::zero(); len * len];
                let mut scores = vec![f64::NEG_INFINITY; len];
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        if !key_mask[start + j] {
                            *s = f64::NEG_INFINITY;
                            continue;
                        }
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        let dot: f64 = qi
                            .iter()
                            .zip(kj)
                            .map(|(a, b)| a.as_f64() * b.as_f64())
                            .sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    for j in 0..len {
                        p[i * len + j] = S::from_f64((scores[j] - max).exp() / z);
                    }
                    let orow = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..len {
                        let w = p[i * len + j];
                        if w == S::zero() {
                            continue;
                        }
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            })),
        ))
    }

    /// Records a scalar whose gradient w.r.t. `input` is already known.
    pub(crate) fn precomputed(&mut self, input: Var, value: S, grad: Tensor<S>) -> Var {
        debug_assert_eq!(grad.shape(), self.value(input).shape());
        self.push(Tensor::scalar(value), Op::Precomputed { input, grad })
    }
}

pub(crate) fn softmax_row_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let mut z = 0.0;
    let mut exps = Vec::with_capacity(row.len());
    for v in row.iter() {
        let e = (v.as_f64() - max).exp();
        z += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = S::from_f64(e / z);
    }
}

fn slot<'a, S: Real>(
    grads: &'a mut [Option<Tensor<S>>],
    nodes: &[Node<S>],
    v: Var,
) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

fn accumulate<S: Real>(
    grads: &mut [Option<Tensor<S>>],
    nodes: &[Node<S>],
    v: Var,
    f: impl FnOnce(&mut [S]),
) {
    if nodes[v.0].requires_grad {
        f(slot(grads, nodes, v).data_mut());
    }
}

/// Applies the backward rule of node `i` given its output gradient `g`.
pub(crate) fn backward<S: Real>(
    nodes: &[Node<S>],
    i: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if nodes[a.0].requires_grad {
                let bd = val(*b).data();
                let da = slot(grads, nodes, *a).data_mut();
                // dA = G * B^T
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    gd,
                    n as isize,
                    1,
                    bd,
                    1,
                    n as isize,
                    S::one(),
                    da,
                );
            }
            if nodes[b.0].requires_grad {
                let ad = val(*a).data();
                let db = slot(grads, nodes, *b).data_mut();
                // dB = A^T * G
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    ad,
                    1,
                    k as isize,
                    gd,
                    n as isize,
                    1,
                    S::one(),
                    db,
                );
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                accumulate(grads, nodes, v, |d| {
                    d.iter_mut().zip(gd).for_each(|(x, &g)| *x += g)
                });
            }
        }
        Op::AddBias(x, b) => {
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(gd).for_each(|(x, &g)| *x += g)
            });
            let cols = y.cols();
            accumulate(grads, nodes, *b, |d| {
                for row in gd.chunks(cols) {
                    d.iter_mut().zip(row).for_each(|(x, &g)| *x += g);
                }
            });
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |d| {
                for ((x, &g), &o) in d.iter_mut().zip(gd).zip(bd) {
                    *x += g * o;
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for ((x, &g), &o) in d.iter_mut().zip(gd).zip(ad) {
                    *x += g * o;
                }
            });
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, |d| {
            d.iter_mut().zip(gd).for_each(|(x, &g)| *x += g * *c)
        }),
        Op::Gelu(x) => {
            let xd = val(*x).data();
            accumulate(grads, nodes, *x, |d| {
                for ((o, &g), &xi) in d.iter_mut().zip(gd).zip(xd) {
                    *o += g * S::from_f64(gelu_grad_f64(xi.as_f64()));
                }
            });
        }
        Op::Log(x) => {
            let xd = val(*x).data();
            accumulate(grads, nodes, *x, |d| {
                for ((o, &g), &xi) in d.iter_mut().zip(gd).zip(xd) {
                    *o += g / xi;
                }
            });
        }
        Op::Exp(x) => accumulate(grads, nodes, *x, |d| {
            for ((o, &g), &yi) in d.iter_mut().zip(gd).zip(y.data()) {
                *o += g * yi;
            }
        }),
        Op::GatherRows(x, idx) => {
            let cols = y.cols();
            accumulate(grads, nodes, *x, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut d[i * cols..(i + 1) * cols];
                    dst.iter_mut()
                        .zip(&gd[r * cols..(r + 1) * cols])
                        .for_each(|(o, &g)| *o += g);
                }
            });
        }
        Op::ScatterAddRows(x, idx) => {
            let cols = y.cols();
            accumulate(grads, nodes, *x, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut d[r * cols..(r + 1) * cols];
                    dst.iter_mut()
                        .zip(&gd[i * cols..(i + 1) * cols])
                        .for_each(|(o, &g)| *o += g);
                }
            });
        }
        Op::MaskFill(x, mask) => accumulate(grads, nodes, *x, |d| {
            for ((o, &g), &m) in d.iter_mut().zip(gd).zip(mask) {
                if !m {
                    *o += g;
                }
            }
        }),
        Op::Transpose(x) => {
            let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
            accumulate(grads, nodes, *x, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += gd[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, |d| {
            d.iter_mut().zip(gd).for_each(|(x, &g)| *x += g)
        }),
        Op::Sum(x) => {
            let g0 = gd[0];
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|x| *x += g0));
        }
        Op::Mean(x) => {
            let g0 = gd[0] / S::from_f64(val(*x).numel() as f64);
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|x| *x += g0));
        }
        Op::Softmax(x) => {
            let cols = y.cols();
            accumulate(grads, nodes, *x, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let dot: f64 = grow
                        .iter()
                        .zip(yrow)
                        .map(|(g, y)| g.as_f64() * y.as_f64())
                        .sum();
                    for ((o, &g), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o += S::from_f64(yi.as_f64() * (g.as_f64() - dot));
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let cols = y.cols();
            accumulate(grads, nodes, *x, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let gsum: f64 = grow.iter().map(|g| g.as_f64()).sum();
                    for ((o, &g), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o += S::from_f64(g.as_f64() - yi.as_f64().exp() * gsum);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let dcols = y.cols();
            let gainv = val(*gain).data();
            accumulate(grads, nodes, *gain, |d| {
                for (grow, hrow) in gd.chunks(dcols).zip(xhat.chunks(dcols)) {
                    for ((o, &g), &h) in d.iter_mut().zip(grow).zip(hrow) {
                        *o += g * h;
                    }
                }
            });
            accumulate(grads, nodes, *bias, |d| {
                for grow in gd.chunks(dcols) {
                    d.iter_mut().zip(grow).for_each(|(o, &g)| *o += g);
                }
            });
            accumulate(grads, nodes, *x, |d| {
                let n = dcols as f64;
                for (((drow, grow), hrow), &r) in d
                    .chunks_mut(dcols)
                    .zip(gd.chunks(dcols))
                    .zip(xhat.chunks(dcols))
                    .zip(rstd)
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..dcols {
                        let dh = grow[j].as_f64() * gainv[j].as_f64();
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j].as_f64();
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    for j in 0..dcols {
                        let dh = grow[j].as_f64() * gainv[j].as_f64();
                        let h = hrow[j].as_f64();
                        drow[j] += S::from_f64(r.as_f64() * (dh - mean_dh - h * mean_dh_h));
                    }
                }
            });
        }
        Op::MulRows(x, f) => {
            let cols = y.cols();
            let (xd, fd) = (val(*x).data(), val(*f).data());
            accumulate(grads, nodes, *x, |d| {
                for ((drow, grow), &fi) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(fd) {
                    drow.iter_mut().zip(grow).for_each(|(o, &g)| *o += g * fi);
                }
            });
            accumulate(grads, nodes, *f, |d| {
                for ((o, grow), xrow) in d.iter_mut().zip(gd.chunks(cols)).zip(xd.chunks(cols)) {
                    *o += grow.iter().zip(xrow).map(|(&g, &x)| g * x).sum::<S>();
                }
            });
        }
        Op::Pick(x, idx) => {
            let cols = val(*x).cols();
            accumulate(grads, nodes, *x, |d| {
                for (i, (&j, &g)) in idx.iter().zip(gd).enumerate() {
                    d[i * cols + j] += g;
                }
            });
        }
        Op::Attention(c) => attention_backward(nodes, c, gd, grads),
        Op::Precomputed { input, grad } => {
            let g0 = gd[0];
            accumulate(grads, nodes, *input, |d| {
                d.iter_mut()
                    .zip(grad.data())
                    .for_each(|(o, &v)| *o += g0 * v)
            });
        }
    }
}

fn attention_backward<S: Real>(
    nodes: &[Node<S>],
    c: &AttentionCache<S>,
    gd: &[S],
    grads: &mut [Option<Tensor<S>>],
) {
    let (qd, kd, vd) = (
        nodes[c.q.0].value.data(),
        nodes[c.k.0].value.data(),
        nodes[c.v.0].value.data(),
    );
    let d = nodes[c.q.0].value.cols();
    let dh = d / c.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = nodes[c.q.0].value.rows();
    let mut dq = vec![0.0f64; t * d];
    let mut dk = vec![0.0f64; t * d];
    let mut dv = vec![0.0f64; t * d];
    let mut probs = c.probs.iter();
    for &(start, len) in &c.segments {
        for h in 0..c.heads {
            let p = probs.next().expect("attention cache per segment and head");
            let off = h * dh;
            let at = |buf: &[S], row: usize, k: usize| buf[(start + row) * d + off + k].as_f64();
            let mut ds = vec![0.0f64; len];
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let mut dot = 0.0;
                for j in 0..len {
                    let pij = prow[j].as_f64();
                    let mut dp = 0.0;
                    for kk in 0..dh {
                        let go = at(gd, i, kk);
                        dp += go * at(vd, j, kk);
                        dv[(start + j) * d + off + kk] += pij * go;
                    }
                    ds[j] = dp;
                    dot += pij * dp;
                }
                for j in 0..len {
                    let pij = prow[j].as_f64();
                    if pij == 0.0 {
                        continue;
                    }
                    let s = pij * (ds[j] - dot) * scale;
                    for kk in 0..dh {
                        dq[(start + i) * d + off + kk] += s * at(kd, j, kk);
                        dk[(start + j) * d + off + kk] += s * at(qd, i, kk);
                    }
                }
            }
        }
    }
    for (var, buf) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
        accumulate(grads, nodes, var, |dst| {
            dst.iter_mut()
                .zip(buf)
                .for_each(|(o, g)| *o += S::from_f64(g))
        });
    }
}
