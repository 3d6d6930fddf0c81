use std::cell::RefMut;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Train mode enables dropout; eval mode makes dropout the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Constant sparse aggregation: output row `r` is `sum_j coef_j * x[row_j]`.
#[derive(Clone, Debug, Default)]
pub struct Aggregation {
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// Per-row column indices for [`Tape::gather`] and [`Tape::scatter`].
pub type RowIndices = Rc<Vec<Vec<usize>>>;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    WeightedSum { w: Var, items: Vec<Var> },
    Aggregate { x: Var, agg: Rc<Aggregation> },
    Gather { x: Var, idx: RowIndices },
    Scatter { x: Var, idx: RowIndices },
    WeightedCe { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    HeadLogits { q: Var, k: Var, heads: usize, tokens: bool },
    HeadMix { a: Var, v: Var, heads: usize, tokens: bool },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation over [`ParamSet`] values for reverse-mode
/// differentiation.
///
/// Param leaves borrow the parameter values; every other node owns its
/// output. `backward` walks the nodes in reverse order and accumulates
/// gradients into the parameters' `grad` cells.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    mode: Mode,
    record: bool,
    seed: u64,
    step: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one dropout call, derived from (global seed, layer id, step).
pub fn dropout_seed(seed: u64, layer: u64, step: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ layer) ^ step)
}

/// `c = a * b + beta * c` on logical shapes `a: m x k`, `b: k x n`.
/// `a_t` / `b_t` mean the slice stores the transpose of the logical matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe
    // in-bounds row-major layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Tape<'p> {
    /// A recording tape. Dropout draws use seed 0, step 0 until
    /// [`Tape::with_dropout`] is called.
    pub fn new(params: &'p ParamSet, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            mode,
            record: true,
            seed: 0,
            step: 0,
        }
    }

    /// A non-recording, eval-mode tape for inference.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            record: false,
            ..Self::new(params, Mode::Eval)
        }
    }

    pub fn with_dropout(mut self, seed: u64, step: u64) -> Self {
        self.seed = seed;
        self.step = step;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(id), ..
            } => self.params.value(*id),
            Node {
                value: Some(t), ..
            } => t,
            _ => unreachable!("non-param node without value"),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Records a parameter leaf. Frozen parameters do not receive gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        let rg = self.record && !self.params.get(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let shape = if av.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_raw(vec![c, r], out), Op::Transpose(x), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(false)
        } else if bv.len() == av.cols() && bv.rows() == 1 {
            Ok(true)
        } else {
            Err(Error::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let bd = bv.data();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + if broadcast { bd[i % c] } else { bd[i] })
            .collect();
        let t = Tensor::from_raw(av.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b, broadcast }, rg))
    }

    /// Elementwise product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let bd = bv.data();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * if broadcast { bd[i % c] } else { bd[i] })
            .collect();
        let t = Tensor::from_raw(av.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        softmax_rows(&mut out, xv.cols());
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Inverted dropout. Identity in eval mode or at rate 0; in train mode
    /// kept entries are scaled by `1 / (1 - rate)`. The mask stream is keyed
    /// by (tape seed, `layer`, tape step).
    pub fn dropout(&mut self, x: Var, rate: f64, layer: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(self.seed, layer, self.step));
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Mean squared error between equal-shape tensors, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let t = Tensor::scalar(s / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        let nd = self.value(*first).shape().len();
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows || pv.shape().len() != nd {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = self.value(*first).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_raw(shape, out), Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenation along the first axis of 2-D tensors.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::from_raw(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Per-row convex mixing: `out[b] = sum_k w[b, k] * items[k][b]`.
    pub fn weighted_sum(&mut self, w: Var, items: &[Var]) -> Result<Var> {
        let wv = self.value(w);
        if items.is_empty() || wv.cols() != items.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: wv.shape().to_vec(),
                rhs: vec![items.len()],
            });
        }
        let shape = self.value(items[0]).shape().to_vec();
        for it in items {
            let iv = self.value(*it);
            if iv.shape() != shape.as_slice() || iv.rows() != wv.rows() {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: iv.shape().to_vec(),
                });
            }
        }
        let f = *shape.last().unwrap();
        let rows = wv.rows();
        let mut out = vec![0.0; rows * f];
        for (k, it) in items.iter().enumerate() {
            let iv = self.value(*it).data();
            for b in 0..rows {
                let c = wv.row(b)[k];
                let dst = &mut out[b * f..(b + 1) * f];
                for (o, x) in dst.iter_mut().zip(&iv[b * f..(b + 1) * f]) {
                    *o += c * x;
                }
            }
        }
        let rg = self.rg(w) || items.iter().any(|i| self.rg(*i));
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::WeightedSum {
                w,
                items: items.to_vec(),
            },
            rg,
        ))
    }

    /// Sparse constant-coefficient row aggregation of a 2-D tensor.
    pub fn aggregate(&mut self, x: Var, agg: Rc<Aggregation>) -> Result<Var> {
        let xv = self.value(x);
        let (n, f) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; agg.rows.len() * f];
        for (r, terms) in agg.rows.iter().enumerate() {
            let dst = &mut out[r * f..(r + 1) * f];
            for &(j, c) in terms {
                if j >= n {
                    return Err(Error::Invalid(format!(
                        "aggregate index {j} out of range for {n} rows"
                    )));
                }
                for (o, v) in dst.iter_mut().zip(xv.row(j)) {
                    *o += c * v;
                }
            }
        }
        let t = Tensor::from_raw(vec![agg.rows.len(), f], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Aggregate { x, agg }, rg))
    }

    /// Picks `idx[r]` columns from row `r`; all index lists share a length.
    pub fn gather(&mut self, x: Var, idx: RowIndices) -> Result<Var> {
        let xv = self.value(x);
        let k = idx.first().map(Vec::len).unwrap_or(0);
        if idx.len() != xv.rows() || k == 0 || idx.iter().any(|r| r.len() != k) {
            return Err(Error::Shape {
                op: "gather",
                lhs: xv.shape().to_vec(),
                rhs: vec![idx.len(), k],
            });
        }
        let mut out = Vec::with_capacity(idx.len() * k);
        for (r, cols) in idx.iter().enumerate() {
            let row = xv.row(r);
            for &c in cols {
                let v = *row
                    .get(c)
                    .ok_or_else(|| Error::Invalid(format!("gather column {c} out of range")))?;
                out.push(v);
            }
        }
        let t = Tensor::from_raw(vec![idx.len(), k], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, idx }, rg))
    }

    /// Inverse placement of [`Tape::gather`]: writes row `r` of `x` into
    /// columns `idx[r]` of a zero `rows x width` matrix.
    pub fn scatter(&mut self, x: Var, idx: RowIndices, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() || idx.iter().any(|r| r.len() != xv.cols()) {
            return Err(Error::Shape {
                op: "scatter",
                lhs: xv.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; idx.len() * width];
        for (r, cols) in idx.iter().enumerate() {
            for (&c, v) in cols.iter().zip(xv.row(r)) {
                if c >= width {
                    return Err(Error::Invalid(format!("scatter column {c} >= {width}")));
                }
                out[r * width + c] += v;
            }
        }
        let t = Tensor::from_raw(vec![idx.len(), width], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scatter { x, idx }, rg))
    }

    /// Mean over rows of `-w[label] * ln softmax(logits)[label]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if labels.len() != lv.rows() || weights.len() != c {
            return Err(Error::Shape {
                op: "weighted_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len(), weights.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("label {bad} >= class count {c}")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += -weights[l] * (row[l] - lse);
        }
        softmax_rows(&mut probs, c);
        let n = labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scaled dot-product logits between head segments of `q` and `k`.
    ///
    /// Both inputs are `[B, D]` with `D = heads * dh`. With `tokens == false`
    /// each head sees exactly one key (its own segment) and the output is
    /// `[B * heads, 1]`. With `tokens == true` the segments act as a sequence
    /// of `heads` tokens and the output is `[B * heads, heads]`.
    pub fn head_logits(&mut self, q: Var, k: Var, heads: usize, tokens: bool) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape() != kv.shape() || heads == 0 || qv.cols() % heads != 0 {
            return Err(Error::Shape {
                op: "head_logits",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (b, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let s = if tokens { heads } else { 1 };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; b * heads * s];
        for bi in 0..b {
            let (qr, kr) = (qv.row(bi), kv.row(bi));
            for t in 0..heads {
                for si in 0..s {
                    let key = if tokens { si } else { t };
                    let dot: f64 = qr[t * dh..(t + 1) * dh]
                        .iter()
                        .zip(&kr[key * dh..(key + 1) * dh])
                        .map(|(x, y)| x * y)
                        .sum();
                    out[(bi * heads + t) * s + si] = dot * scale;
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            Tensor::from_raw(vec![b * heads, s], out),
            Op::HeadLogits {
                q,
                k,
                heads,
                tokens,
            },
            rg,
        ))
    }

    /// Applies attention weights from [`Tape::head_logits`] (after softmax)
    /// to the head segments of `v`.
    pub fn head_mix(&mut self, a: Var, v: Var, heads: usize, tokens: bool) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (b, d) = (vv.rows(), vv.cols());
        let s = if tokens { heads } else { 1 };
        if heads == 0 || d % heads != 0 || av.rows() != b * heads || av.cols() != s {
            return Err(Error::Shape {
                op: "head_mix",
                lhs: av.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let dh = d / heads;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let vr = vv.row(bi);
            for t in 0..heads {
                let w = av.row(bi * heads + t);
                let dst = &mut out[bi * d + t * dh..bi * d + (t + 1) * dh];
                for (si, &wt) in w.iter().enumerate() {
                    let key = if tokens { si } else { t };
                    for (o, x) in dst.iter_mut().zip(&vr[key * dh..(key + 1) * dh]) {
                        *o += wt * x;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(
            Tensor::from_raw(vv.shape().to_vec(), out),
            Op::HeadMix {
                a,
                v,
                heads,
                tokens,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Gradients are added to the `grad`
    /// cell of every reachable, non-frozen parameter; calling it twice
    /// accumulates twice.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.record || !self.rg(loss) {
            return Err(Error::Backward(
                "no recorded computation connects the loss to a parameter".into(),
            ));
        }
        let mut store = GradStore {
            nodes: (0..=loss.0).map(|_| None).collect(),
            params: self
                .params
                .iter()
                .map(|p| if p.frozen { None } else { Some(p.grad.borrow_mut()) })
                .collect(),
            tape: self,
        };
        store.nodes[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = store.nodes[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut store);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], st: &mut GradStore<'_, 'p>) {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => {
                if let Some(slot) = st.params[id.0].as_mut() {
                    for (d, x) in slot.data_mut().iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = st.slot(*a) {
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
                if let Some(gb) = st.slot(*b) {
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                if let Some(gx) = st.slot(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(ga) = st.slot(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = st.slot(*b) {
                    if *broadcast {
                        let c = gb.len();
                        for (i, x) in g.iter().enumerate() {
                            gb[i % c] += x;
                        }
                    } else {
                        add_into(gb, g);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = bv.len();
                if let Some(ga) = st.slot(*a) {
                    for (i, x) in g.iter().enumerate() {
                        ga[i] += x * if *broadcast { bv[i % c] } else { bv[i] };
                    }
                }
                if let Some(gb) = st.slot(*b) {
                    for (i, x) in g.iter().enumerate() {
                        let j = if *broadcast { i % c } else { i };
                        gb[j] += x * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = st.slot(*x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = st.slot(*x) {
                    for ((d, v), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = out.unwrap().data();
                let c = self.value(*x).cols();
                if let Some(gx) = st.slot(*x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += inv * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = out.unwrap().data();
                let c = self.value(*x).cols();
                if let Some(gx) = st.slot(*x) {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = st.slot(*x) {
                    for ((d, v), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / av.len() as f64;
                if let Some(ga) = st.slot(*a) {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += s * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = st.slot(*b) {
                    for (i, d) in gb.iter_mut().enumerate() {
                        *d -= s * (av[i] - bv[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = st.slot(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = st.slot(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Concat(parts) => {
                let total = out.unwrap().cols();
                let rows = g.len() / total;
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = st.slot(*p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = st.slot(*p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::WeightedSum { w, items } => {
                let wv = self.value(*w);
                let rows = wv.rows();
                let f = g.len() / rows;
                for (k, it) in items.iter().enumerate() {
                    if let Some(gi) = st.slot(*it) {
                        for b in 0..rows {
                            let c = wv.row(b)[k];
                            for j in 0..f {
                                gi[b * f + j] += c * g[b * f + j];
                            }
                        }
                    }
                }
                if st.needs(*w) {
                    let kk = items.len();
                    let mut gw = vec![0.0; rows * kk];
                    for (k, it) in items.iter().enumerate() {
                        let iv = self.value(*it).data();
                        for b in 0..rows {
                            gw[b * kk + k] = g[b * f..(b + 1) * f]
                                .iter()
                                .zip(&iv[b * f..(b + 1) * f])
                                .map(|(a, c)| a * c)
                                .sum();
                        }
                    }
                    add_into(st.slot(*w).unwrap(), &gw);
                }
            }
            Op::Aggregate { x, agg } => {
                let f = self.value(*x).cols();
                if let Some(gx) = st.slot(*x) {
                    for (r, terms) in agg.rows.iter().enumerate() {
                        for &(j, c) in terms {
                            for t in 0..f {
                                gx[j * f + t] += c * g[r * f + t];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let d = self.value(*x).cols();
                if let Some(gx) = st.slot(*x) {
                    let k = idx[0].len();
                    for (r, cols) in idx.iter().enumerate() {
                        for (t, &c) in cols.iter().enumerate() {
                            gx[r * d + c] += g[r * k + t];
                        }
                    }
                }
            }
            Op::Scatter { x, idx } => {
                let width = out.unwrap().cols();
                let k = self.value(*x).cols();
                if let Some(gx) = st.slot(*x) {
                    for (r, cols) in idx.iter().enumerate() {
                        for (t, &c) in cols.iter().enumerate() {
                            gx[r * k + t] += g[r * width + c];
                        }
                    }
                }
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let c = weights.len();
                let n = labels.len() as f64;
                if let Some(gl) = st.slot(*logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        let s = g[0] * weights[l] / n;
                        for j in 0..c {
                            let y = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - y);
                        }
                    }
                }
            }
            Op::HeadLogits {
                q,
                k,
                heads,
                tokens,
            } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (b, d) = (qv.rows(), qv.cols());
                let (h, dh) = (*heads, d / heads);
                let s = if *tokens { h } else { 1 };
                let scale = 1.0 / (dh as f64).sqrt();
                let key = |t: usize, si: usize| if *tokens { si } else { t };
                if let Some(gq) = st.slot(*q) {
                    for bi in 0..b {
                        for t in 0..h {
                            for si in 0..s {
                                let w = g[(bi * h + t) * s + si] * scale;
                                let kk = key(t, si);
                                for j in 0..dh {
                                    gq[bi * d + t * dh + j] += w * kv.data()[bi * d + kk * dh + j];
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = st.slot(*k) {
                    for bi in 0..b {
                        for t in 0..h {
                            for si in 0..s {
                                let w = g[(bi * h + t) * s + si] * scale;
                                let kk = key(t, si);
                                for j in 0..dh {
                                    gk[bi * d + kk * dh + j] += w * qv.data()[bi * d + t * dh + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadMix {
                a,
                v,
                heads,
                tokens,
            } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let (b, d) = (vv.rows(), vv.cols());
                let (h, dh) = (*heads, d / heads);
                let s = if *tokens { h } else { 1 };
                let key = |t: usize, si: usize| if *tokens { si } else { t };
                if let Some(ga) = st.slot(*a) {
                    for bi in 0..b {
                        for t in 0..h {
                            for si in 0..s {
                                let kk = key(t, si);
                                let dot: f64 = (0..dh)
                                    .map(|j| g[bi * d + t * dh + j] * vv.data()[bi * d + kk * dh + j])
                                    .sum();
                                ga[(bi * h + t) * s + si] += dot;
                            }
                        }
                    }
                }
                if let Some(gv) = st.slot(*v) {
                    for bi in 0..b {
                        for t in 0..h {
                            for si in 0..s {
                                let kk = key(t, si);
                                let w = av.data()[(bi * h + t) * s + si];
                                for j in 0..dh {
                                    gv[bi * d + kk * dh + j] += w * g[bi * d + t * dh + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct GradStore<'t, 'p> {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<RefMut<'p, Tensor>>>,
    tape: &'t Tape<'p>,
}

impl GradStore<'_, '_> {
    fn needs(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    /// Gradient buffer for `v`, or `None` when `v` needs no gradient.
    /// Param leaves write straight into the parameter's grad cell.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        if let Op::Param(id) = node.op {
            return self.params[id.0].as_mut().map(|t| t.data_mut());
        }
        let len = self.tape.value(v).len();
        Some(self.nodes[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}
