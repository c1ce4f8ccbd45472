//! Gradient tape: records every operation of a forward pass so that
//! [`Tape::backward`] can replay them in reverse.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! reverse topological order and each record is visited exactly once.
//! All tensors are 2D (`[rows, cols]`); row-wise ops act along the last axis.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::TensorError;

type Res<T> = Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Clamp { src: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { src: Var, eps: f64 },
    GatherRows { src: Var, idx: Vec<usize> },
    ScatterAddRows { src: Var, idx: Vec<usize> },
    ScaleRows { src: Var, factors: Vec<f64> },
    SegmentMax { src: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    FeatureAttention { q: Var, k: Var, v: Var, heads: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// `c = a * b + beta * c` for strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Per edge and head, treats the `d_k` projected features of query, key and
/// value as `d_k` scalar tokens: `out[a] = Σ_b softmax_b(q_a k_b / √d_k) v_b`.
fn feature_attention_probs(q: &[f64], k: &[f64], scale: f64, probs: &mut [f64]) {
    let dk = q.len();
    for a in 0..dk {
        let row = &mut probs[a * dk..(a + 1) * dk];
        let qa = q[a] * scale;
        let mut max = f64::NEG_INFINITY;
        for b in 0..dk {
            row[b] = qa * k[b];
            max = max.max(row[b]);
        }
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        row.iter_mut().for_each(|r| *r /= sum);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Res<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, t: Tensor) -> Res<Var> {
        let t = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = t.dims2();
            Tensor::new(vec![r, c], t.into_data())?
        };
        self.push(t, Op::Leaf, "leaf")
    }

    /// Records (once per tape) the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Res<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            &mut out,
            0.0,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Res<Var> {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), "transpose")
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Res<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let (r, c) = ta.dims2();
        Tensor::new(vec![r, c], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    fn zip_row(&mut self, a: Var, row: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Res<Tensor> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (r, c) = ta.dims2();
        if tb.len() != c {
            return Err(mismatch(op, ta, tb));
        }
        let b = tb.data();
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = f(data[i * c + j], b[j]);
            }
        }
        Tensor::new(vec![r, c], data)
    }

    /// `a[r, c] + row[1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Res<Var> {
        let t = self.zip_row(a, row, "add_row", |x, y| x + y)?;
        self.push(t, Op::AddRow(a, row), "add_row")
    }

    /// `a[r, c] * row[1, c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Res<Var> {
        let t = self.zip_row(a, row, "mul_row", |x, y| x * y)?;
        self.push(t, Op::MulRow(a, row), "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Res<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), "scale")
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Res<Var> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let first = self.value(parts[0]).clone();
        let (r0, c0) = first.dims2();
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.value(*p);
                    if t.cols() != c0 {
                        return Err(mismatch("concat", &first, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            1 => {
                let mut cols = 0;
                for p in parts {
                    let t = self.value(*p);
                    if t.rows() != r0 {
                        return Err(mismatch("concat", &first, t));
                    }
                    cols += t.cols();
                }
                let mut data = vec![0.0; r0 * cols];
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let c = t.cols();
                    for i in 0..r0 {
                        data[i * cols + off..i * cols + off + c].copy_from_slice(t.row_slice(i));
                    }
                    off += c;
                }
                Tensor::new(vec![r0, cols], data)?
            }
            _ => return Err(invalid("concat", format!("axis {axis} out of range"))),
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let out = match axis {
            0 if start + len <= r => {
                Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?
            }
            1 if start + len <= c => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&t.row_slice(i)[start..start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
            _ => {
                return Err(invalid(
                    "slice",
                    format!("axis {axis} range {start}..{} exceeds shape {:?}", start + len, t.shape()),
                ))
            }
        };
        self.push(out, Op::Slice { src: a, axis, start }, "slice")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Res<Var> {
        let t = self.value(a).map(f);
        self.push(t, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Softplus(a), "softplus", softplus)
    }

    pub fn abs(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Res<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Res<Var> {
        self.unary(a, Op::Clamp { src: a, lo, hi }, "clamp", |x| x.clamp(lo, hi))
    }

    fn rowwise(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            f(t.row_slice(i), &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![r, c], out)?;
        self.push(t, op, name)
    }

    /// Softmax along `axis` (1 = within each row, 0 = within each column).
    /// Inputs are shifted by their maximum before exponentiation.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Res<Var> {
        match axis {
            1 => self.rowwise(a, Op::Softmax(a), "softmax", softmax_row),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax(t, 1)?;
                self.transpose(s)
            }
            _ => Err(invalid("softmax", format!("axis {axis} out of range"))),
        }
    }

    pub fn log_softmax(&mut self, a: Var) -> Res<Var> {
        self.rowwise(a, Op::LogSoftmax(a), "log_softmax", |x, out| {
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out.iter_mut().zip(x) {
                *o = v - lse;
            }
        })
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Res<Var> {
        self.rowwise(a, Op::LayerNorm { src: a, eps }, "layer_norm", |x, out| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(x) {
                *o = (v - mean) * rstd;
            }
        })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(invalid("gather_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push(
            out,
            Op::GatherRows {
                src: a,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// `out[idx[e]] += a[e]` into `n` zero rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if idx.len() != r {
            return Err(invalid(
                "scatter_add_rows",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let mut data = vec![0.0; n * c];
        for (e, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(invalid("scatter_add_rows", format!("row {i} out of {n}")));
            }
            for (d, s) in data[i * c..(i + 1) * c].iter_mut().zip(t.row_slice(e)) {
                *d += s;
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        self.push(
            out,
            Op::ScatterAddRows {
                src: a,
                idx: idx.to_vec(),
            },
            "scatter_add_rows",
        )
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if factors.len() != r {
            return Err(invalid("scale_rows", format!("{} factors for {r} rows", factors.len())));
        }
        let mut data = t.data().to_vec();
        for i in 0..r {
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= factors[i]);
        }
        let out = Tensor::new(vec![r, c], data)?;
        self.push(
            out,
            Op::ScaleRows {
                src: a,
                factors: factors.to_vec(),
            },
            "scale_rows",
        )
    }

    /// Column-wise maximum over the rows of each segment. `segment[r]` names the
    /// output row for input row `r`; ties keep the first row.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], n: usize) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if segment.len() != r {
            return Err(invalid("segment_max", format!("{} segment ids for {r} rows", segment.len())));
        }
        let mut argmax = vec![usize::MAX; n * c];
        let mut data = vec![0.0; n * c];
        for (row, &s) in segment.iter().enumerate() {
            if s >= n {
                return Err(invalid("segment_max", format!("segment {s} out of {n}")));
            }
            for j in 0..c {
                let v = t.data()[row * c + j];
                let slot = s * c + j;
                if argmax[slot] == usize::MAX || v > data[slot] {
                    argmax[slot] = row;
                    data[slot] = v;
                }
            }
        }
        if argmax.contains(&usize::MAX) {
            return Err(invalid("segment_max", "empty segment"));
        }
        let out = Tensor::new(vec![n, c], data)?;
        self.push(out, Op::SegmentMax { src: a, argmax }, "segment_max")
    }

    pub fn sum(&mut self, a: Var) -> Res<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Res<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Sums over rows, giving `[1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Res<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        self.push(Tensor::new(vec![1, c], out)?, Op::SumRows(a), "sum_rows")
    }

    /// Row-wise feature attention: each row of `q`, `k`, `v` (shape `[E, D]`) is
    /// split into `heads` blocks of `d_k = D / heads` features, and each block
    /// computes `softmax(q kᵀ / √d_k) v` with the features as tokens.
    pub fn feature_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Res<Var> {
        let (e, d) = self.dims(q);
        if self.dims(k) != (e, d) {
            return Err(mismatch("feature_attention", self.value(q), self.value(k)));
        }
        if self.dims(v) != (e, d) {
            return Err(mismatch("feature_attention", self.value(q), self.value(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid(
                "feature_attention",
                format!("model dim {d} not divisible by {heads} heads"),
            ));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; e * d];
        let mut probs = vec![0.0; dk * dk];
        for row in 0..e {
            for h in 0..heads {
                let off = row * d + h * dk;
                feature_attention_probs(&qd[off..off + dk], &kd[off..off + dk], scale, &mut probs);
                for a in 0..dk {
                    let p = &probs[a * dk..(a + 1) * dk];
                    out[off + a] = p.iter().zip(&vd[off..off + dk]).map(|(x, y)| x * y).sum();
                }
            }
        }
        let t = Tensor::new(vec![e, d], out)?;
        self.push(t, Op::FeatureAttention { q, k, v, heads }, "feature_attention")
    }

    /// Discrete branch decisions (ReLU signs, clamp and abs regions, max-pool
    /// winners). Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.value(*a).data().iter().map(|x| (*x > 0.0) as u64)),
                Op::Abs(a) => sig.extend(self.value(*a).data().iter().map(|x| (*x > 0.0) as u64 + 2 * (*x < 0.0) as u64)),
                Op::Clamp { src, lo, hi } => sig.extend(
                    self.value(*src)
                        .data()
                        .iter()
                        .map(|x| (*x < *lo) as u64 + 2 * (*x > *hi) as u64),
                ),
                Op::SegmentMax { argmax, .. } => sig.extend(argmax.iter().map(|i| *i as u64)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Res<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let bd = self.value(*b).data();
                let ga = slot(nodes, grads, *a);
                gemm(m, n, k, gd, n, 1, bd, 1, n, ga.data_mut(), 1.0);
                let ad = self.value(*a).data();
                let gb = slot(nodes, grads, *b);
                gemm(k, m, n, ad, 1, k, gd, n, 1, gb.data_mut(), 1.0);
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let ga = slot(nodes, grads, *a).data_mut();
                for ii in 0..r {
                    for j in 0..c {
                        ga[ii * c + j] += gd[j * r + ii];
                    }
                }
            }
            Op::Add(a, b) => {
                slot(nodes, grads, *a).add_assign(g);
                slot(nodes, grads, *b).add_assign(g);
            }
            Op::Sub(a, b) => {
                slot(nodes, grads, *a).add_assign(g);
                let gb = slot(nodes, grads, *b).data_mut();
                for (x, d) in gb.iter_mut().zip(gd) {
                    *x -= d;
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), bv) in ga.iter_mut().zip(gd).zip(bd) {
                    *x += d * bv;
                }
                let ad = self.value(*a).data();
                let gb = slot(nodes, grads, *b).data_mut();
                for ((x, d), av) in gb.iter_mut().zip(gd).zip(ad) {
                    *x += d * av;
                }
            }
            Op::AddRow(a, row) => {
                slot(nodes, grads, *a).add_assign(g);
                let c = y.cols();
                let gr = slot(nodes, grads, *row).data_mut();
                for (idx, d) in gd.iter().enumerate() {
                    gr[idx % c] += d;
                }
            }
            Op::MulRow(a, row) => {
                let c = y.cols();
                let rd = self.value(*row).data();
                let ga = slot(nodes, grads, *a).data_mut();
                for (idx, d) in gd.iter().enumerate() {
                    ga[idx] += d * rd[idx % c];
                }
                let ad = self.value(*a).data();
                let gr = slot(nodes, grads, *row).data_mut();
                for (idx, d) in gd.iter().enumerate() {
                    gr[idx % c] += d * ad[idx];
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(nodes, grads, *a).data_mut();
                for (x, d) in ga.iter_mut().zip(gd) {
                    *x += s * d;
                }
            }
            Op::Concat { parts, axis } => {
                let cols = y.cols();
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.dims(*p);
                    let gp = slot(nodes, grads, *p).data_mut();
                    if *axis == 0 {
                        for (x, d) in gp.iter_mut().zip(&gd[off * cols..(off + pr) * cols]) {
                            *x += d;
                        }
                        off += pr;
                    } else {
                        for r in 0..pr {
                            for j in 0..pc {
                                gp[r * pc + j] += gd[r * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (sr, sc) = self.dims(*src);
                let (yr, yc) = y.dims2();
                let gs = slot(nodes, grads, *src).data_mut();
                if *axis == 0 {
                    for (x, d) in gs[start * sc..(start + yr) * sc].iter_mut().zip(gd) {
                        *x += d;
                    }
                } else {
                    for r in 0..sr {
                        for j in 0..yc {
                            gs[r * sc + start + j] += gd[r * yc + j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), v) in ga.iter_mut().zip(gd).zip(ad) {
                    if *v > 0.0 {
                        *x += d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), s) in ga.iter_mut().zip(gd).zip(y.data()) {
                    *x += d * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), t) in ga.iter_mut().zip(gd).zip(y.data()) {
                    *x += d * (1.0 - t * t);
                }
            }
            Op::Exp(a) => {
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), e) in ga.iter_mut().zip(gd).zip(y.data()) {
                    *x += d * e;
                }
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), v) in ga.iter_mut().zip(gd).zip(ad) {
                    *x += d * sigmoid(*v);
                }
            }
            Op::Abs(a) => {
                let ad = self.value(*a).data();
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), v) in ga.iter_mut().zip(gd).zip(ad) {
                    if *v > 0.0 {
                        *x += d;
                    } else if *v < 0.0 {
                        *x -= d;
                    }
                }
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                let ga = slot(nodes, grads, *a).data_mut();
                for ((x, d), v) in ga.iter_mut().zip(gd).zip(ad) {
                    *x += 2.0 * v * d;
                }
            }
            Op::Clamp { src, lo, hi } => {
                let ad = self.value(*src).data();
                let ga = slot(nodes, grads, *src).data_mut();
                for ((x, d), v) in ga.iter_mut().zip(gd).zip(ad) {
                    if *v >= *lo && *v <= *hi {
                        *x += d;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let ga = slot(nodes, grads, *a).data_mut();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let ga = slot(nodes, grads, *a).data_mut();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[r * c + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { src, eps } => {
                let c = y.cols();
                let xd = self.value(*src).data();
                let ga = slot(nodes, grads, *src).data_mut();
                for r in 0..y.rows() {
                    let x = &xd[r * c..(r + 1) * c];
                    let n = c as f64;
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let yr = y.row_slice(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gymean = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for j in 0..c {
                        ga[r * c + j] += rstd * (gr[j] - gmean - yr[j] * gymean);
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = y.cols();
                let gs = slot(nodes, grads, *src).data_mut();
                for (e, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        gs[r * c + j] += gd[e * c + j];
                    }
                }
            }
            Op::ScatterAddRows { src, idx } => {
                let c = y.cols();
                let gs = slot(nodes, grads, *src).data_mut();
                for (e, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        gs[e * c + j] += gd[r * c + j];
                    }
                }
            }
            Op::ScaleRows { src, factors } => {
                let c = y.cols();
                let gs = slot(nodes, grads, *src).data_mut();
                for (idx, d) in gd.iter().enumerate() {
                    gs[idx] += d * factors[idx / c];
                }
            }
            Op::SegmentMax { src, argmax } => {
                let c = y.cols();
                let gs = slot(nodes, grads, *src).data_mut();
                for (slot, &row) in argmax.iter().enumerate() {
                    gs[row * c + slot % c] += gd[slot];
                }
            }
            Op::Sum(a) => {
                let ga = slot(nodes, grads, *a).data_mut();
                ga.iter_mut().for_each(|x| *x += gd[0]);
            }
            Op::Mean(a) => {
                let ga = slot(nodes, grads, *a).data_mut();
                let s = gd[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
            Op::SumRows(a) => {
                let c = y.cols();
                let ga = slot(nodes, grads, *a).data_mut();
                for (idx, x) in ga.iter_mut().enumerate() {
                    *x += gd[idx % c];
                }
            }
            Op::FeatureAttention { q, k, v, heads } => {
                self.feature_attention_backward(*q, *k, *v, *heads, gd, grads);
            }
        }
    }

    fn feature_attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (e, d) = self.dims(q);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; e * d];
        let mut gk = vec![0.0; e * d];
        let mut gv = vec![0.0; e * d];
        let mut probs = vec![0.0; dk * dk];
        let mut ds = vec![0.0; dk];
        for row in 0..e {
            for h in 0..heads {
                let off = row * d + h * dk;
                let (qs, ks, vs) = (&qd[off..off + dk], &kd[off..off + dk], &vd[off..off + dk]);
                feature_attention_probs(qs, ks, scale, &mut probs);
                for a in 0..dk {
                    let ga = gd[off + a];
                    let p = &probs[a * dk..(a + 1) * dk];
                    // dP[b] = ga * v[b]; dS = P ⊙ (dP - Σ P dP)
                    let mut dot = 0.0;
                    for b in 0..dk {
                        gv[off + b] += p[b] * ga;
                        dot += p[b] * ga * vs[b];
                    }
                    let mut gqa = 0.0;
                    for b in 0..dk {
                        ds[b] = p[b] * (ga * vs[b] - dot) * scale;
                        gqa += ds[b] * ks[b];
                        gk[off + b] += ds[b] * qs[a];
                    }
                    gq[off + a] += gqa;
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            let shape = self.value(var).shape().to_vec();
            let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(&shape));
            for (x, d) in slot.data_mut().iter_mut().zip(g) {
                *x += d;
            }
        }
    }

    /// Parameters recorded on this tape with their handles.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(p, v)| (*p, *v))
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter used on `tape`, sorted by id.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = tape
            .params()
            .map(|(id, var)| {
                let g = self
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
