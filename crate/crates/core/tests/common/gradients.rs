//! Finite-difference checks of every differentiable op and trainable module.

use sgforge::autodiff::gradcheck::{check, inputs_as_params, GradcheckConfig, GradcheckReport};
use sgforge::autodiff::nn::{cross_entropy, soft_cross_entropy, Activation};
use sgforge::autodiff::{Adjacency, Embedding, GcnLayer, GruCell, Linear, Mlp, MultiHeadAttention, ParamStore, Tape, Tensor, Var};
use sgforge::data::synth_dataset;
use sgforge::error::Result;
use sgforge::sgp::{targets_from_graph, CcfaLayer, SgpInput};
use sgforge::train::{new_gen, new_sgp};
use sgforge::vae::{vae_loss, JslBlock};

use super::{rand_tensor, rng, tiny_config};

pub type Case = (&'static str, GradcheckReport);

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn weighted(tape: &mut Tape, out: Var) -> Result<Var> {
    let s = tape.shape(out).to_vec();
    let w = tape.leaf(rand_tensor(&mut rng(99), s[0], s[1]))?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p)?)
}

fn op(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Case> {
    let mut store = ParamStore::new();
    let ids = inputs_as_params(&mut store, inputs)?;
    let report = check(&mut store, GradcheckConfig::default(), |tape, store| {
        let vars = ids.iter().map(|id| tape.param(store, *id)).collect::<std::result::Result<Vec<_>, _>>()?;
        let out = f(tape, &vars)?;
        weighted(tape, out)
    })?;
    Ok((name, report))
}

fn t(seed: u64, r: usize, c: usize) -> Tensor {
    rand_tensor(&mut rng(seed), r, c)
}

/// Every tape op on small random inputs.
pub fn op_cases() -> Result<Vec<Case>> {
    let a34 = || t(1, 3, 4);
    let b34 = || t(2, 3, 4);
    let row4 = || t(3, 1, 4);
    Ok(vec![
        op("matmul", vec![a34(), t(4, 4, 2)], |tp, v| Ok(tp.matmul(v[0], v[1])?))?,
        op("transpose", vec![a34()], |tp, v| Ok(tp.transpose(v[0])?))?,
        op("add", vec![a34(), b34()], |tp, v| Ok(tp.add(v[0], v[1])?))?,
        op("sub", vec![a34(), b34()], |tp, v| Ok(tp.sub(v[0], v[1])?))?,
        op("mul", vec![a34(), b34()], |tp, v| Ok(tp.mul(v[0], v[1])?))?,
        op("add_row", vec![a34(), row4()], |tp, v| Ok(tp.add_row(v[0], v[1])?))?,
        op("mul_row", vec![a34(), row4()], |tp, v| Ok(tp.mul_row(v[0], v[1])?))?,
        op("scale", vec![a34()], |tp, v| Ok(tp.scale(v[0], -1.7)?))?,
        op("concat_rows", vec![t(5, 2, 3), t(6, 3, 3)], |tp, v| Ok(tp.concat(&[v[0], v[1]], 0)?))?,
        op("concat_cols", vec![t(5, 3, 2), a34()], |tp, v| Ok(tp.concat(&[v[0], v[1]], 1)?))?,
        op("slice_cols", vec![a34()], |tp, v| Ok(tp.slice(v[0], 1, 1, 2)?))?,
        op("slice_rows", vec![a34()], |tp, v| Ok(tp.slice(v[0], 0, 1, 2)?))?,
        op("relu", vec![a34()], |tp, v| Ok(tp.relu(v[0])?))?,
        op("sigmoid", vec![a34()], |tp, v| Ok(tp.sigmoid(v[0])?))?,
        op("tanh", vec![a34()], |tp, v| Ok(tp.tanh(v[0])?))?,
        op("exp", vec![a34()], |tp, v| Ok(tp.exp(v[0])?))?,
        op("softplus", vec![a34()], |tp, v| Ok(tp.softplus(v[0])?))?,
        op("abs", vec![a34()], |tp, v| Ok(tp.abs(v[0])?))?,
        op("square", vec![a34()], |tp, v| Ok(tp.square(v[0])?))?,
        op("clamp", vec![a34()], |tp, v| Ok(tp.clamp(v[0], -0.5, 0.5)?))?,
        op("softmax_rows", vec![a34()], |tp, v| Ok(tp.softmax(v[0], 1)?))?,
        op("softmax_cols", vec![a34()], |tp, v| Ok(tp.softmax(v[0], 0)?))?,
        op("log_softmax", vec![a34()], |tp, v| Ok(tp.log_softmax(v[0])?))?,
        op("layer_norm", vec![a34()], |tp, v| Ok(tp.layer_norm(v[0], 1e-5)?))?,
        op("gather_rows", vec![a34()], |tp, v| Ok(tp.gather_rows(v[0], &[2, 0, 2, 1])?))?,
        op("scatter_add_rows", vec![t(7, 5, 3)], |tp, v| {
            Ok(tp.scatter_add_rows(v[0], &[0, 2, 0, 1, 2], 4)?)
        })?,
        op("scale_rows", vec![a34()], |tp, v| Ok(tp.scale_rows(v[0], &[0.5, 2.0, -1.0])?))?,
        op("segment_max", vec![t(8, 6, 4)], |tp, v| {
            Ok(tp.segment_max(v[0], &[0, 0, 1, 1, 1, 2], 3)?)
        })?,
        op("sum", vec![a34()], |tp, v| Ok(tp.sum(v[0])?))?,
        op("mean", vec![a34()], |tp, v| Ok(tp.mean(v[0])?))?,
        op("sum_rows", vec![a34()], |tp, v| Ok(tp.sum_rows(v[0])?))?,
        op("feature_attention", vec![a34(), b34(), t(9, 3, 4)], |tp, v| {
            Ok(tp.feature_attention(v[0], v[1], v[2], 2)?)
        })?,
        op("cross_entropy", vec![t(10, 4, 5)], |tp, v| cross_entropy(tp, v[0], &[0, 4, 2, 2]))?,
        op("soft_cross_entropy", vec![t(11, 4, 5)], |tp, v| {
            let p = Tensor::from_rows(&[[0.2, 0.2, 0.2, 0.2, 0.2], [1.0, 0.0, 0.0, 0.0, 0.0], [0.1, 0.3, 0.0, 0.5, 0.1], [0.0, 0.0, 0.5, 0.5, 0.0]], 5)?;
            soft_cross_entropy(tp, v[0], &p)
        })?,
    ])
}

fn module(name: &'static str, store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> Result<Case> {
    Ok((name, check(store, GradcheckConfig::default(), f)?))
}

fn edges() -> Adjacency {
    Adjacency::new(4, &[(0, 1), (1, 0), (1, 2), (3, 2), (2, 3)]).unwrap()
}

/// Every trainable layer, the composite blocks and both full models.
pub fn module_cases() -> Result<Vec<Case>> {
    let mut r = rng(5);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 4, 3, &mut r)?;
    out.push(module("linear", &mut s, |tp, st| {
        let x = tp.leaf(t(20, 3, 4))?;
        let y = lin.forward(tp, st, x)?;
        weighted(tp, y)
    })?);

    let mut s = ParamStore::new();
    let mlp = Mlp::new(&mut s, "mlp", &[4, 5, 3], Activation::Relu, Activation::Tanh, &mut r)?;
    out.push(module("mlp", &mut s, |tp, st| {
        let x = tp.leaf(t(21, 3, 4))?;
        let y = mlp.forward(tp, st, x)?;
        weighted(tp, y)
    })?);

    let mut s = ParamStore::new();
    let emb = Embedding::new(&mut s, "emb", 5, 3, &mut r)?;
    out.push(module("embedding", &mut s, |tp, st| {
        let y = emb.forward(tp, st, &[4, 0, 4, 2])?;
        weighted(tp, y)
    })?);

    let mut s = ParamStore::new();
    let gcn = GcnLayer::new(&mut s, "gcn", 3, 2, 4, &mut r)?;
    let adj = edges();
    out.push(module("gcn_layer", &mut s, |tp, st| {
        let n = tp.leaf(t(22, 4, 3))?;
        let e = tp.leaf(t(23, 5, 2))?;
        let (h, e) = gcn.forward(tp, st, n, Some(e), &adj)?;
        let a = weighted(tp, h)?;
        let b = weighted(tp, e.expect("edges"))?;
        Ok(tp.add(a, b)?)
    })?);

    let mut s = ParamStore::new();
    let gru = GruCell::new(&mut s, "gru", 5, 4, &mut r)?;
    out.push(module("gru_cell", &mut s, |tp, st| {
        let h = tp.leaf(t(24, 3, 4))?;
        let x = tp.leaf(t(25, 3, 5))?;
        let y = gru.forward(tp, st, h, x)?;
        weighted(tp, y)
    })?);

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 2, &mut r)?;
    out.push(module("multi_head_attention", &mut s, |tp, st| {
        let q = tp.leaf(t(26, 3, 4))?;
        let kv = tp.leaf(t(27, 5, 4))?;
        let (y, _) = mha.forward(tp, st, q, kv, kv)?;
        weighted(tp, y)
    })?);
    out.push(module("feature_wise_attention", &mut s, |tp, st| {
        let q = tp.leaf(t(28, 3, 4))?;
        let k = tp.leaf(t(29, 3, 4))?;
        let v = tp.leaf(t(30, 3, 4))?;
        let y = mha.feature_wise(tp, st, q, k, v)?;
        weighted(tp, y)
    })?);

    let mut s = ParamStore::new();
    let l0 = CcfaLayer::new(&mut s, "ccfa0", 4, 2, false, &mut r)?;
    let l1 = CcfaLayer::new(&mut s, "ccfa1", 4, 2, true, &mut r)?;
    out.push(module("ccfa_two_layers", &mut s, |tp, st| {
        let h = tp.leaf(t(31, 4, 4))?;
        let e = tp.leaf(t(32, 5, 4))?;
        let (h, e) = l0.forward(tp, st, h, Some(e), &adj)?;
        let (h, e) = l1.forward(tp, st, h, e, &adj)?;
        let a = weighted(tp, h)?;
        let b = weighted(tp, e.expect("edges"))?;
        Ok(tp.add(a, b)?)
    })?);

    let mut s = ParamStore::new();
    let jsl = JslBlock::new(&mut s, "jsl", 3, 2, 5, 4, 2, &mut r)?;
    out.push(module("jsl_block", &mut s, |tp, st| {
        let n = tp.leaf(t(33, 4, 3))?;
        let e = tp.leaf(t(34, 5, 2))?;
        let b = tp.leaf(t(35, 4, 5))?;
        let c = tp.leaf(t(36, 4, sgforge::shapes::SHAPE_CODE_DIM))?;
        let (h, e) = jsl.forward(tp, st, n, Some(e), b, c, &adj)?;
        let a = weighted(tp, h)?;
        let b = weighted(tp, e.expect("edges"))?;
        Ok(tp.add(a, b)?)
    })?);

    let cfg = tiny_config();
    let data = synth_dataset(&cfg)?;
    let rec = &data[0];

    let model = new_sgp(&cfg, &data)?;
    let input = SgpInput::new(&rec.entities, model.margin)?;
    let (nt, et) = targets_from_graph(&input, &rec.graph)?;
    let (net, mut s) = (model.net.clone(), model.params.clone());
    out.push(module("predictor_loss", &mut s, |tp, st| net.loss(tp, st, &input, &nt, &et))?);

    let model = new_gen(&cfg, &data)?;
    let ext = model.extend(&rec.graph, Some(&rec.codes()))?;
    let eps = t(37, ext.len(), model.net.cfg.latent_dim);
    let (net, stats, mut s) = (model.net.clone(), model.stats, model.params.clone());
    out.push(module("generator_loss", &mut s, |tp, st| {
        let lat = net.encode(tp, st, &ext, &stats, Some(&eps))?;
        let dec = net.decode(tp, st, lat.z, &ext)?;
        let tg = net.targets(&ext, &stats)?;
        let c = &net.cfg;
        Ok(vae_loss(tp, &dec, &tg, lat.mu, lat.logvar, c.lambda_recon, c.lambda_kl)?.total)
    })?);

    Ok(out)
}
