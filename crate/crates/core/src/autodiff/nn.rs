//! Neural building blocks recorded on a [`Tape`].
//!
//! Each layer owns [`ParamId`]s in a shared [`ParamStore`]; `forward` records
//! the computation on the tape using the current parameter values.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result, TensorError};

/// Dense layer `y = x W + b`, with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.uniform(&format!("{name}.weight"), [d_in, d_out], d_in, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), [1, d_out], d_in, rng)?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Sets `W = I` (square layers only) and `b = 0`.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.d_in != self.d_out {
            return Err(Error::Validation(format!(
                "identity init needs a square layer, got {}x{}",
                self.d_in, self.d_out
            )));
        }
        let w = store.value_mut(self.weight);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.d_in {
            w.data_mut()[i * self.d_out + i] = 1.0;
        }
        store.value_mut(self.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var, TensorError> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::None => Ok(x),
    }
}

/// Linear layers with `hidden` activations between them and `output`
/// activation after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Validation(format!("mlp {name} needs at least two sizes")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            h = activate(tape, h, if i == last { self.output } else { self.hidden })?;
        }
        Ok(h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.layers.iter().for_each(|l| l.zero(store));
    }
}

/// Lookup table `[n, d]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub n: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = store.uniform(&format!("{name}.table"), [n, d], 1, rng)?;
        Ok(Embedding { table, n, d })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table)?;
        Ok(tape.gather_rows(t, idx)?)
    }
}

/// Directed edge list over `n` nodes with degree bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub n: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Adjacency {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        for &(s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::Graph(format!("edge ({s}, {d}) references a node outside 0..{n}")));
            }
        }
        Ok(Adjacency {
            n,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// `1 / count` per node of the edges whose `side` endpoint is that node
    /// (0 for nodes with none).
    pub fn inv_counts(&self, side: &[usize]) -> Vec<f64> {
        let mut c = vec![0usize; self.n];
        side.iter().for_each(|&i| c[i] += 1);
        c.into_iter().map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect()
    }

    /// `1 / (in + out degree)` per node (0 for isolated nodes).
    pub fn inv_degree(&self) -> Vec<f64> {
        let mut c = vec![0usize; self.n];
        self.src.iter().chain(&self.dst).for_each(|&i| c[i] += 1);
        c.into_iter().map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect()
    }
}

/// Mean of `rows` (one per edge) grouped by `target`, into `n` rows.
pub fn mean_by(tape: &mut Tape, rows: Var, target: &[usize], inv: &[f64], n: usize) -> Result<Var> {
    let s = tape.scatter_add_rows(rows, target, n)?;
    Ok(tape.scale_rows(s, inv)?)
}

/// Edge-conditioned graph convolution.
///
/// Every directed edge runs one linear map over `src ⊕ edge ⊕ dst` followed by
/// ReLU; the result splits into a message for the source, the new edge
/// feature, and a message for the destination. Each node averages the
/// messages it receives and adds its own linear transform:
/// `h' = relu(self(h) + mean(messages))`.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub message: Linear,
    pub self_map: Linear,
    pub d_node: usize,
    pub d_edge: usize,
    pub d_edge_out: usize,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_node: usize,
        d_edge: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let message = Linear::new(store, &format!("{name}.message"), 2 * d_node + d_edge, 2 * d_out + d_out, rng)?;
        let self_map = Linear::new(store, &format!("{name}.self"), d_node, d_out, rng)?;
        Ok(GcnLayer {
            message,
            self_map,
            d_node,
            d_edge,
            d_edge_out: d_out,
        })
    }

    pub fn d_out(&self) -> usize {
        self.self_map.d_out
    }

    /// Returns updated `(nodes, edges)`; with no edges, `edges` is `None`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        nodes: Var,
        edges: Option<Var>,
        adj: &Adjacency,
    ) -> Result<(Var, Option<Var>)> {
        let d = self.d_out();
        let own = self.self_map.forward(tape, store, nodes)?;
        let edges = match edges {
            Some(e) if adj.num_edges() > 0 => e,
            _ => return Ok((tape.relu(own)?, None)),
        };
        let hs = tape.gather_rows(nodes, &adj.src)?;
        let hd = tape.gather_rows(nodes, &adj.dst)?;
        let cat = tape.concat(&[hs, edges, hd], 1)?;
        let m = self.message.forward(tape, store, cat)?;
        let m = tape.relu(m)?;
        let to_src = tape.slice(m, 1, 0, d)?;
        let new_edges = tape.slice(m, 1, d, d)?;
        let to_dst = tape.slice(m, 1, 2 * d, d)?;
        let both = tape.concat(&[to_src, to_dst], 0)?;
        let target: Vec<usize> = adj.src.iter().chain(&adj.dst).copied().collect();
        let agg = mean_by(tape, both, &target, &adj.inv_degree(), adj.n)?;
        let h = tape.add(own, agg)?;
        Ok((tape.relu(h)?, Some(new_edges)))
    }
}

/// GRU cell: `r = σ(x Wr + h Ur + b_r)`, `z = σ(x Wz + h Uz + b_z)`,
/// `n = tanh(x Wn + b_n + r ⊙ (h Un + c_n))`, `h' = (1 − z) ⊙ h + z ⊙ n`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub d_hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GruCell {
            input: Linear::new(store, &format!("{name}.input"), d_in, 3 * d_hidden, rng)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), d_hidden, 3 * d_hidden, rng)?,
            d_hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let d = self.d_hidden;
        if tape.shape(h)[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "gru_cell",
                lhs: tape.shape(h).to_vec(),
                rhs: vec![tape.shape(h)[0], d],
            }
            .into());
        }
        let gx = self.input.forward(tape, store, x)?;
        let gh = self.hidden.forward(tape, store, h)?;
        let xr = tape.slice(gx, 1, 0, d)?;
        let xz = tape.slice(gx, 1, d, d)?;
        let xn = tape.slice(gx, 1, 2 * d, d)?;
        let hr = tape.slice(gh, 1, 0, d)?;
        let hz = tape.slice(gh, 1, d, d)?;
        let hn = tape.slice(gh, 1, 2 * d, d)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let rh = tape.mul(r, hn)?;
        let n = tape.add(xn, rh)?;
        let n = tape.tanh(n)?;
        // h + z ⊙ (n − h)
        let diff = tape.sub(n, h)?;
        let step = tape.mul(z, diff)?;
        Ok(tape.add(h, step)?)
    }

    /// Biases that push the update gate towards `value` (large positive means
    /// `h' → n`).
    pub fn set_update_bias(&self, store: &mut ParamStore, value: f64) {
        let d = self.d_hidden;
        for id in [self.input.bias, self.hidden.bias] {
            store.value_mut(id).data_mut()[d..2 * d].iter_mut().for_each(|v| *v = value / 2.0);
        }
    }
}

/// Multi-head attention with query/key/value projections and an output mix.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub mix: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Validation(format!(
                "model dim {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng)?,
            mix: Linear::new(store, &format!("{name}.mix"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// Token attention: `q: [nq, D]`, `k, v: [nk, D]`. Returns the mixed output
    /// `[nq, D]` and each head's `[nq, nk]` weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let qp = self.query.forward(tape, store, q)?;
        let kp = self.key.forward(tape, store, k)?;
        let vp = self.value.forward(tape, store, v)?;
        let dk = self.d_k();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(qp, 1, h * dk, dk)?;
            let kh = tape.slice(kp, 1, h * dk, dk)?;
            let vh = tape.slice(vp, 1, h * dk, dk)?;
            let (o, w) = scaled_dot_product(tape, qh, kh, vh)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = tape.concat(&outs, 1)?;
        Ok((self.mix.forward(tape, store, cat)?, weights))
    }

    /// Feature-wise variant for row-aligned inputs (`[E, D]` each): within
    /// every row and head the `d_k` projected features act as tokens.
    pub fn feature_wise(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        let qp = self.query.forward(tape, store, q)?;
        let kp = self.key.forward(tape, store, k)?;
        let vp = self.value.forward(tape, store, v)?;
        let a = tape.feature_attention(qp, kp, vp, self.heads)?;
        self.mix.forward(tape, store, a)
    }

    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        for l in [&self.query, &self.key, &self.value, &self.mix] {
            l.set_identity(store)?;
        }
        Ok(())
    }
}

/// `softmax(q kᵀ / √d) v` for `q: [nq, d]`, `k, v: [nk, d]`. Returns the
/// output and the `[nq, nk]` attention weights.
pub fn scaled_dot_product(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    let w = tape.softmax(s, 1)?;
    Ok((tape.matmul(w, v)?, w))
}

/// Mean cross-entropy of row-wise logits against integer targets.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (r, c) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if targets.len() != r || r == 0 {
        return Err(Error::Validation(format!(
            "cross entropy over {r} rows with {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| **t >= c) {
        return Err(Error::Validation(format!("target class {t} out of {c}")));
    }
    let ls = tape.log_softmax(logits)?;
    let mut mask = Tensor::zeros(&[r, c]);
    for (i, t) in targets.iter().enumerate() {
        mask.data_mut()[i * c + t] = -1.0 / r as f64;
    }
    let m = tape.leaf(mask)?;
    let picked = tape.mul(ls, m)?;
    Ok(tape.sum(picked)?)
}

/// Cross-entropy against full target distributions: `−mean_r Σ_c p log q`.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let r = tape.shape(logits)[0];
    if targets.shape() != tape.shape(logits) || r == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "soft_cross_entropy",
            lhs: tape.shape(logits).to_vec(),
            rhs: targets.shape().to_vec(),
        }
        .into());
    }
    let ls = tape.log_softmax(logits)?;
    let w = tape.leaf(targets.map(|p| -p / r as f64))?;
    let prod = tape.mul(ls, w)?;
    Ok(tape.sum(prod)?)
}
