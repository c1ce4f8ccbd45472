//! Graph variational autoencoder for layouts and shape codes.
//!
//! Nodes of the input scene graph are extended with a class embedding, a
//! frozen context vector and an initial shape code; edges with a predicate
//! embedding and the context vector of the phrase "subject predicate
//! object". The encoder stacks two joint shape/layout blocks with an
//! additive skip and emits a Gaussian per node. The decoder runs a GCN over
//! the latents and splits into a box head, a yaw-class head and a shape head.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{cross_entropy, Activation, Adjacency, Embedding, GcnLayer, Linear, Mlp};
use crate::autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::data::{derive_seed, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, Obb, MIN_DIM};
use crate::graph::{argmax, NodeId, SceneGraph, Vocab};
use crate::shapes::{Layout, LayoutNode, SHAPE_CODE_DIM};

/// Bound on the predicted log-variance.
pub const LOGVAR_LIMIT: f64 = 10.0;
/// Normalized box parameters per node: dims (3) and centroid (3).
pub const BOX_PARAMS: usize = 6;

/// Frozen token embeddings. Each token maps to a seeded Gaussian row; a
/// phrase embeds to the unit-normalized mean of its token rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ContextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ContextEmbedder { dim, seed }
    }

    /// Lowercase, whitespace-separated tokens.
    pub fn tokens(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }

    pub fn token_row(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[fnv1a(token)]));
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(Error::Validation("cannot embed an empty phrase".into()));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            v.iter_mut().zip(self.token_row(t)).for_each(|(a, b)| *a += b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(v)
    }
}

/// Index of the yaw bin whose center is nearest; bin `k` is centered at
/// `k · 2π / bins`.
pub fn yaw_class(yaw: f64, bins: usize) -> usize {
    let w = TAU / bins as f64;
    (normalize_yaw(yaw) / w).round() as usize % bins
}

pub fn yaw_center(class: usize, bins: usize) -> f64 {
    class as f64 * TAU / bins as f64
}

/// Box normalization: centroids are standardized per axis, dims divided by
/// their per-axis mean so they stay positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub centroid_mean: [f64; 3],
    pub centroid_scale: [f64; 3],
    pub dim_scale: [f64; 3],
}

impl BoxStats {
    pub fn identity() -> Self {
        BoxStats {
            centroid_mean: [0.0; 3],
            centroid_scale: [1.0; 3],
            dim_scale: [1.0; 3],
        }
    }

    pub fn fit<'a>(boxes: impl IntoIterator<Item = &'a Obb>) -> Result<Self> {
        let boxes: Vec<&Obb> = boxes.into_iter().collect();
        if boxes.is_empty() {
            return Err(Error::Validation("box statistics need at least one box".into()));
        }
        let n = boxes.len() as f64;
        let mut s = BoxStats::identity();
        for a in 0..3 {
            let mean = boxes.iter().map(|b| b.centroid()[a]).sum::<f64>() / n;
            let var = boxes.iter().map(|b| (b.centroid()[a] - mean).powi(2)).sum::<f64>() / n;
            s.centroid_mean[a] = mean;
            s.centroid_scale[a] = var.sqrt().max(1e-3);
            s.dim_scale[a] = boxes.iter().map(|b| b.dims()[a]).sum::<f64>() / n;
        }
        Ok(s)
    }

    pub fn encode(&self, obb: &Obb) -> [f64; BOX_PARAMS] {
        let (c, d) = (obb.centroid(), obb.dims());
        let mut v = [0.0; BOX_PARAMS];
        for a in 0..3 {
            v[a] = d[a] / self.dim_scale[a];
            v[3 + a] = (c[a] - self.centroid_mean[a]) / self.centroid_scale[a];
        }
        v
    }

    /// Inverse of [`BoxStats::encode`]; dims are floored just above the
    /// smallest valid box size.
    pub fn decode(&self, v: &[f64], yaw: f64) -> Result<Obb> {
        let mut c = [0.0; 3];
        let mut d = [0.0; 3];
        for a in 0..3 {
            d[a] = (v[a] * self.dim_scale[a]).max(2.0 * MIN_DIM);
            c[a] = v[3 + a] * self.centroid_scale[a] + self.centroid_mean[a];
        }
        Obb::new(c, d, yaw)
    }
}

/// Scene graph with resolved labels, context vectors and shape codes.
#[derive(Debug, Clone)]
pub struct ExtendedGraph {
    pub ids: Vec<NodeId>,
    pub classes: Vec<usize>,
    pub node_context: Tensor,
    pub predicates: Vec<usize>,
    pub edge_context: Tensor,
    pub obbs: Vec<Obb>,
    pub shape_codes: Tensor,
    pub adj: Adjacency,
}

impl ExtendedGraph {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Resolves labels against `vocab` by name and attaches context vectors and
/// shape codes.
pub fn extend_graph(
    graph: &SceneGraph,
    codes: &BTreeMap<NodeId, Vec<f64>>,
    vocab: &Vocab,
    embedder: &ContextEmbedder,
) -> Result<ExtendedGraph> {
    graph.validate()?;
    let class_name = |k: usize| graph.vocab.objects[k].as_str();
    let mut classes = Vec::with_capacity(graph.nodes.len());
    let mut node_ctx = Vec::with_capacity(graph.nodes.len() * embedder.dim);
    let mut code_rows = Vec::with_capacity(graph.nodes.len() * SHAPE_CODE_DIM);
    for n in &graph.nodes {
        let name = class_name(n.class_dist.argmax());
        let c = vocab
            .object_index(name)
            .ok_or_else(|| Error::Validation(format!("class {name:?} is not in the model vocabulary")))?;
        classes.push(c);
        node_ctx.extend(embedder.embed(name)?);
        let code = codes
            .get(&n.id)
            .ok_or_else(|| Error::Validation(format!("node {} has no shape code", n.id)))?;
        if code.len() != SHAPE_CODE_DIM {
            return Err(Error::Validation(format!(
                "node {} shape code has length {}, expected {SHAPE_CODE_DIM}",
                n.id,
                code.len()
            )));
        }
        code_rows.extend_from_slice(code);
    }
    let index = graph.index_of();
    let mut predicates = Vec::with_capacity(graph.edges.len());
    let mut edge_ctx = Vec::with_capacity(graph.edges.len() * embedder.dim);
    let mut pairs = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        let (s, d) = (index[&e.src], index[&e.dst]);
        let pname = graph.vocab.predicates[e.predicate_dist.argmax()].as_str();
        let p = vocab
            .predicate_index(pname)
            .ok_or_else(|| Error::Validation(format!("predicate {pname:?} is not in the model vocabulary")))?;
        predicates.push(p);
        let phrase = format!("{} {pname} {}", vocab.objects[classes[s]], vocab.objects[classes[d]]);
        edge_ctx.extend(embedder.embed(&phrase)?);
        pairs.push((s, d));
    }
    let n = graph.nodes.len();
    Ok(ExtendedGraph {
        ids: graph.nodes.iter().map(|n| n.id).collect(),
        classes,
        node_context: Tensor::new(vec![n, embedder.dim], node_ctx)?,
        predicates,
        edge_context: Tensor::new(vec![pairs.len(), embedder.dim], edge_ctx)?,
        obbs: graph.nodes.iter().map(|n| n.obb).collect(),
        shape_codes: Tensor::new(vec![n, SHAPE_CODE_DIM], code_rows)?,
        adj: Adjacency::new(n, &pairs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub model_dim: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub class_dim: usize,
    pub gcn_layers: usize,
    pub yaw_bins: usize,
    pub objects: usize,
    pub predicates: usize,
    pub lambda_recon: f64,
    pub lambda_kl: f64,
}

impl GenConfig {
    pub fn from_config(cfg: &crate::config::Config, objects: usize, predicates: usize) -> Self {
        GenConfig {
            model_dim: cfg.gen_model_dim,
            latent_dim: cfg.gen_latent_dim,
            context_dim: cfg.gen_context_dim,
            class_dim: cfg.gen_class_dim,
            gcn_layers: cfg.gen_gcn_layers,
            yaw_bins: cfg.gen_yaw_bins,
            objects,
            predicates,
            lambda_recon: cfg.lambda_recon,
            lambda_kl: cfg.lambda_kl,
        }
    }

    /// Label embedding plus context vector.
    pub fn label_dim(&self) -> usize {
        self.class_dim + self.context_dim
    }

    /// Normalized box parameters plus the yaw one-hot.
    pub fn box_dim(&self) -> usize {
        BOX_PARAMS + self.yaw_bins
    }
}

/// Joint shape/layout block: a fused stage over the sum of a shape embedding
/// and a layout embedding, then a layout stage re-conditioned on the raw box
/// parameters.
#[derive(Debug, Clone)]
pub struct JslBlock {
    pub shape_embed: Linear,
    pub layout_embed: Linear,
    pub edge_embed: Linear,
    pub fused: Vec<GcnLayer>,
    pub reproject: Linear,
    pub layout: Vec<GcnLayer>,
    pub output: Linear,
}

impl JslBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_node: usize,
        d_edge: usize,
        d_box: usize,
        d: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape_embed = Linear::new(store, &format!("{name}.shape_embed"), d_node + SHAPE_CODE_DIM, d, rng)?;
        let layout_embed = Linear::new(store, &format!("{name}.layout_embed"), d_node + d_box, d, rng)?;
        let edge_embed = Linear::new(store, &format!("{name}.edge_embed"), d_edge, d, rng)?;
        let fused = (0..layers)
            .map(|l| GcnLayer::new(store, &format!("{name}.fused{l}"), d, d, d, rng))
            .collect::<Result<_>>()?;
        let reproject = Linear::new(store, &format!("{name}.reproject"), d_box, d, rng)?;
        let layout = (0..layers)
            .map(|l| GcnLayer::new(store, &format!("{name}.layout{l}"), if l == 0 { 2 * d } else { d }, d, d, rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(store, &format!("{name}.output"), d, d, rng)?;
        Ok(JslBlock {
            shape_embed,
            layout_embed,
            edge_embed,
            fused,
            reproject,
            layout,
            output,
        })
    }

    /// Stage-1 input: shape embedding plus layout embedding.
    pub fn fused_input(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, boxes: Var, codes: Var) -> Result<Var> {
        let sc = tape.concat(&[nodes, codes], 1)?;
        let s = self.shape_embed.forward(tape, store, sc)?;
        let lc = tape.concat(&[nodes, boxes], 1)?;
        let l = self.layout_embed.forward(tape, store, lc)?;
        Ok(tape.add(s, l)?)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        nodes: Var,
        edges: Option<Var>,
        boxes: Var,
        codes: Var,
        adj: &Adjacency,
    ) -> Result<(Var, Option<Var>)> {
        let mut h = self.fused_input(tape, store, nodes, boxes, codes)?;
        let mut e = match edges {
            Some(e) => Some(self.edge_embed.forward(tape, store, e)?),
            None => None,
        };
        for g in &self.fused {
            (h, e) = g.forward(tape, store, h, e, adj)?;
        }
        let r = self.reproject.forward(tape, store, boxes)?;
        h = tape.concat(&[h, r], 1)?;
        for g in &self.layout {
            (h, e) = g.forward(tape, store, h, e, adj)?;
        }
        Ok((self.output.forward(tape, store, h)?, e))
    }
}

/// Per-node Gaussian and the sample drawn from it.
#[derive(Debug, Clone, Copy)]
pub struct Latent {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Same as [`Latent`] with values copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
    pub z: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// Normalized dims (after softplus) and centroid, `[N, 6]`.
    pub boxes: Var,
    pub yaw_logits: Var,
    pub shapes: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Reconstruction targets in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeTargets {
    pub boxes: Tensor,
    pub yaw: Vec<usize>,
    pub shapes: Tensor,
}

#[derive(Debug, Clone)]
pub struct GenNet {
    pub cfg: GenConfig,
    pub class_embed: Embedding,
    pub predicate_embed: Embedding,
    pub blocks: [JslBlock; 2],
    pub latent_head: Mlp,
    pub decoder_in: Linear,
    pub decoder_edge: Linear,
    pub decoder_gcn: Vec<GcnLayer>,
    pub box_head: Mlp,
    pub yaw_head: Mlp,
    pub shape_head: Mlp,
}

impl GenNet {
    pub fn new(store: &mut ParamStore, cfg: GenConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let (d, dz, dl, db) = (cfg.model_dim, cfg.latent_dim, cfg.label_dim(), cfg.box_dim());
        let class_embed = Embedding::new(store, "gen.class_embed", cfg.objects, cfg.class_dim, r)?;
        let predicate_embed = Embedding::new(store, "gen.predicate_embed", cfg.predicates, cfg.class_dim, r)?;
        let blocks = [
            JslBlock::new(store, "gen.block0", dl, dl, db, d, cfg.gcn_layers, r)?,
            JslBlock::new(store, "gen.block1", d, d, db, d, cfg.gcn_layers, r)?,
        ];
        let latent_head = Mlp::new(store, "gen.latent_head", &[d + cfg.yaw_bins, d, 2 * dz], Activation::Relu, Activation::None, r)?;
        let decoder_in = Linear::new(store, "gen.decoder_in", dz + dl, d, r)?;
        let decoder_edge = Linear::new(store, "gen.decoder_edge", dl, d, r)?;
        let decoder_gcn = (0..cfg.gcn_layers)
            .map(|l| GcnLayer::new(store, &format!("gen.decoder{l}"), d, d, d, r))
            .collect::<Result<_>>()?;
        let box_head = Mlp::new(store, "gen.box_head", &[d, d, BOX_PARAMS], Activation::Relu, Activation::None, r)?;
        let yaw_head = Mlp::new(store, "gen.yaw_head", &[d, d, cfg.yaw_bins], Activation::Relu, Activation::None, r)?;
        let shape_head = Mlp::new(store, "gen.shape_head", &[dz + dl, d, SHAPE_CODE_DIM], Activation::Relu, Activation::None, r)?;
        Ok(GenNet {
            cfg,
            class_embed,
            predicate_embed,
            blocks,
            latent_head,
            decoder_in,
            decoder_edge,
            decoder_gcn,
            box_head,
            yaw_head,
            shape_head,
        })
    }

    /// Label features for nodes and (if any) edges.
    pub fn labels(&self, tape: &mut Tape, store: &ParamStore, ext: &ExtendedGraph) -> Result<(Var, Option<Var>)> {
        let c = self.class_embed.forward(tape, store, &ext.classes)?;
        let ctx = tape.leaf(ext.node_context.clone())?;
        let nodes = tape.concat(&[c, ctx], 1)?;
        if ext.adj.num_edges() == 0 {
            return Ok((nodes, None));
        }
        let p = self.predicate_embed.forward(tape, store, &ext.predicates)?;
        let ctx = tape.leaf(ext.edge_context.clone())?;
        Ok((nodes, Some(tape.concat(&[p, ctx], 1)?)))
    }

    /// Normalized box parameters followed by the yaw one-hot.
    pub fn box_input(&self, ext: &ExtendedGraph, stats: &BoxStats) -> Result<Tensor> {
        let bins = self.cfg.yaw_bins;
        let mut data = Vec::with_capacity(ext.len() * self.cfg.box_dim());
        for o in &ext.obbs {
            data.extend_from_slice(&stats.encode(o));
            let mut onehot = vec![0.0; bins];
            onehot[yaw_class(o.yaw(), bins)] = 1.0;
            data.extend(onehot);
        }
        Ok(Tensor::new(vec![ext.len(), self.cfg.box_dim()], data)?)
    }

    /// Encoder features: block 0 output plus block 1 output.
    pub fn encode_features(&self, tape: &mut Tape, store: &ParamStore, ext: &ExtendedGraph, stats: &BoxStats) -> Result<Var> {
        if ext.is_empty() {
            return Err(Error::Validation("cannot encode an empty graph".into()));
        }
        let (nodes, edges) = self.labels(tape, store, ext)?;
        let boxes = tape.leaf(self.box_input(ext, stats)?)?;
        let codes = tape.leaf(ext.shape_codes.clone())?;
        let (h1, e1) = self.blocks[0].forward(tape, store, nodes, edges, boxes, codes, &ext.adj)?;
        let (h2, _) = self.blocks[1].forward(tape, store, h1, e1, boxes, codes, &ext.adj)?;
        Ok(tape.add(h1, h2)?)
    }

    /// Mean and clamped log-variance per node; `z = μ + exp(logvar/2) ⊙ ε`,
    /// or `z = μ` without `eps`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ext: &ExtendedGraph,
        stats: &BoxStats,
        eps: Option<&Tensor>,
    ) -> Result<Latent> {
        let h = self.encode_features(tape, store, ext, stats)?;
        let bins = self.cfg.yaw_bins;
        let mut onehot = Tensor::zeros(&[ext.len(), bins]);
        for (k, o) in ext.obbs.iter().enumerate() {
            onehot.data_mut()[k * bins + yaw_class(o.yaw(), bins)] = 1.0;
        }
        let yaw = tape.leaf(onehot)?;
        let cat = tape.concat(&[h, yaw], 1)?;
        let out = self.latent_head.forward(tape, store, cat)?;
        let dz = self.cfg.latent_dim;
        let mu = tape.slice(out, 1, 0, dz)?;
        let lv = tape.slice(out, 1, dz, dz)?;
        let logvar = tape.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        let z = match eps {
            None => mu,
            Some(eps) => {
                let half = tape.scale(logvar, 0.5)?;
                let std = tape.exp(half)?;
                let e = tape.leaf(eps.clone())?;
                let noise = tape.mul(std, e)?;
                tape.add(mu, noise)?
            }
        };
        Ok(Latent { mu, logvar, z })
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var, ext: &ExtendedGraph) -> Result<Decoded> {
        if tape.shape(z) != [ext.len(), self.cfg.latent_dim] {
            return Err(Error::Validation(format!(
                "latent shape {:?} does not match {} nodes",
                tape.shape(z),
                ext.len()
            )));
        }
        let (nodes, edges) = self.labels(tape, store, ext)?;
        let zin = tape.concat(&[z, nodes], 1)?;
        let mut h = self.decoder_in.forward(tape, store, zin)?;
        let mut e = match edges {
            Some(e) => Some(self.decoder_edge.forward(tape, store, e)?),
            None => None,
        };
        for g in &self.decoder_gcn {
            (h, e) = g.forward(tape, store, h, e, &ext.adj)?;
        }
        let raw = self.box_head.forward(tape, store, h)?;
        let dims = tape.slice(raw, 1, 0, 3)?;
        let dims = tape.softplus(dims)?;
        let cent = tape.slice(raw, 1, 3, 3)?;
        let boxes = tape.concat(&[dims, cent], 1)?;
        let yaw_logits = self.yaw_head.forward(tape, store, h)?;
        let shapes = self.shape_head.forward(tape, store, zin)?;
        Ok(Decoded {
            boxes,
            yaw_logits,
            shapes,
        })
    }

    pub fn targets(&self, ext: &ExtendedGraph, stats: &BoxStats) -> Result<VaeTargets> {
        let boxes: Vec<f64> = ext.obbs.iter().flat_map(|o| stats.encode(o)).collect();
        Ok(VaeTargets {
            boxes: Tensor::new(vec![ext.len(), BOX_PARAMS], boxes)?,
            yaw: ext.obbs.iter().map(|o| yaw_class(o.yaw(), self.cfg.yaw_bins)).collect(),
            shapes: ext.shape_codes.clone(),
        })
    }
}

/// `λ_recon · L_recon + λ_kl · L_KL`. The reconstruction term is, per node,
/// the L1 shape-code error plus the L1 box error plus the yaw-class
/// cross-entropy; the KL term is the closed form against N(0, I). Both are
/// averaged over nodes.
pub fn vae_loss(
    tape: &mut Tape,
    dec: &Decoded,
    targets: &VaeTargets,
    mu: Var,
    logvar: Var,
    lambda_recon: f64,
    lambda_kl: f64,
) -> Result<LossParts> {
    let n = tape.shape(dec.boxes)[0];
    if n == 0 || targets.yaw.len() != n || targets.boxes.shape()[0] != n || tape.shape(mu)[0] != n {
        return Err(Error::Validation(format!(
            "loss over {n} decoded nodes with {} targets",
            targets.yaw.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let l1 = |tape: &mut Tape, pred: Var, target: &Tensor| -> Result<Var> {
        let t = tape.leaf(target.clone())?;
        let d = tape.sub(pred, t)?;
        let a = tape.abs(d)?;
        let s = tape.sum(a)?;
        Ok(tape.scale(s, inv_n)?)
    };
    let shape = l1(tape, dec.shapes, &targets.shapes)?;
    let boxes = l1(tape, dec.boxes, &targets.boxes)?;
    let yaw = cross_entropy(tape, dec.yaw_logits, &targets.yaw)?;
    let recon = tape.add(shape, boxes)?;
    let recon = tape.add(recon, yaw)?;
    let dz = tape.shape(mu)[1];
    let m2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let k = tape.add(m2, var)?;
    let k = tape.sub(k, logvar)?;
    let k = tape.sum(k)?;
    let k = tape.scale(k, 0.5 * inv_n)?;
    let offset = tape.leaf(Tensor::scalar(-0.5 * dz as f64))?;
    let kl = tape.add(k, offset)?;
    let a = tape.scale(recon, lambda_recon)?;
    let b = tape.scale(kl, lambda_kl)?;
    let total = tape.add(a, b)?;
    Ok(LossParts { total, recon, kl })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    /// Encode the graph's own boxes and decode the means.
    Reconstruct,
    /// Decode latents drawn from N(0, I).
    Sample,
}

impl FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruct" => Ok(GenerateMode::Reconstruct),
            "sample" => Ok(GenerateMode::Sample),
            _ => Err(Error::Config(format!("unknown generation mode {s:?}"))),
        }
    }
}

/// A generator with everything needed to decode: parameters, vocabulary,
/// context embedder, box statistics and per-class mean shape codes (used
/// when a graph arrives without codes).
#[derive(Debug, Clone)]
pub struct GenModel {
    pub net: GenNet,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub embedder: ContextEmbedder,
    pub stats: BoxStats,
    pub class_priors: Vec<Vec<f64>>,
}

/// Mean ground-truth shape code per class; zeros for absent classes.
pub fn class_priors(records: &[SceneRecord], vocab: &Vocab) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; SHAPE_CODE_DIM]; vocab.objects.len()];
    let mut counts = vec![0usize; vocab.objects.len()];
    for r in records {
        let codes = r.codes();
        for n in &r.graph.nodes {
            let c = n.class_dist.argmax();
            if let (Some(code), Some(sum)) = (codes.get(&n.id), sums.get_mut(c)) {
                sum.iter_mut().zip(code).for_each(|(s, v)| *s += v);
                counts[c] += 1;
            }
        }
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        if *c > 0 {
            s.iter_mut().for_each(|v| *v /= *c as f64);
        }
    }
    sums
}

impl GenModel {
    pub fn new(cfg: GenConfig, vocab: Vocab, stats: BoxStats, class_priors: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if cfg.objects != vocab.objects.len() || cfg.predicates != vocab.predicates.len() {
            return Err(Error::Validation("embedding sizes differ from the vocabulary".into()));
        }
        if class_priors.len() != vocab.objects.len() || class_priors.iter().any(|p| p.len() != SHAPE_CODE_DIM) {
            return Err(Error::Validation("need one shape-code prior per class".into()));
        }
        let embedder = ContextEmbedder::new(cfg.context_dim, derive_seed(seed, &[0xc0de]));
        let mut params = ParamStore::new();
        let net = GenNet::new(&mut params, cfg, seed)?;
        Ok(GenModel {
            net,
            params,
            vocab,
            embedder,
            stats,
            class_priors,
        })
    }

    /// Extends `graph`; nodes missing from `codes` take their class prior.
    pub fn extend(&self, graph: &SceneGraph, codes: Option<&BTreeMap<NodeId, Vec<f64>>>) -> Result<ExtendedGraph> {
        let mut all = codes.cloned().unwrap_or_default();
        for n in &graph.nodes {
            if let std::collections::btree_map::Entry::Vacant(e) = all.entry(n.id) {
                let name = &graph.vocab.objects[n.class_dist.argmax()];
                let c = self
                    .vocab
                    .object_index(name)
                    .ok_or_else(|| Error::Validation(format!("class {name:?} is not in the model vocabulary")))?;
                e.insert(self.class_priors[c].clone());
            }
        }
        extend_graph(graph, &all, &self.vocab, &self.embedder)
    }

    /// Training objective with a fresh reparameterization draw.
    pub fn loss(&self, tape: &mut Tape, ext: &ExtendedGraph, rng: &mut impl Rng) -> Result<LossParts> {
        let dz = self.net.cfg.latent_dim;
        let eps = Tensor::new(
            vec![ext.len(), dz],
            (0..ext.len() * dz).map(|_| rng.sample(StandardNormal)).collect(),
        )?;
        self.loss_with_eps(tape, ext, Some(&eps))
    }

    pub fn loss_with_eps(&self, tape: &mut Tape, ext: &ExtendedGraph, eps: Option<&Tensor>) -> Result<LossParts> {
        let lat = self.net.encode(tape, &self.params, ext, &self.stats, eps)?;
        let dec = self.net.decode(tape, &self.params, lat.z, ext)?;
        let t = self.net.targets(ext, &self.stats)?;
        let c = &self.net.cfg;
        vae_loss(tape, &dec, &t, lat.mu, lat.logvar, c.lambda_recon, c.lambda_kl)
    }

    pub fn latent(&self, ext: &ExtendedGraph, eps: Option<&Tensor>) -> Result<LatentGraph> {
        let mut tape = Tape::new();
        let lat = self.net.encode(&mut tape, &self.params, ext, &self.stats, eps)?;
        let eps = eps
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[ext.len(), self.net.cfg.latent_dim]));
        Ok(LatentGraph {
            mu: tape.value(lat.mu).clone(),
            logvar: tape.value(lat.logvar).clone(),
            eps,
            z: tape.value(lat.z).clone(),
        })
    }

    /// Layout and shape codes for `graph`. Sample mode draws latents from a
    /// generator seeded with `seed`; reconstruct mode uses the means.
    pub fn generate(
        &self,
        graph: &SceneGraph,
        codes: Option<&BTreeMap<NodeId, Vec<f64>>>,
        mode: GenerateMode,
        seed: u64,
    ) -> Result<Layout> {
        if graph.nodes.is_empty() {
            return Ok(Layout { nodes: Vec::new() });
        }
        let ext = self.extend(graph, codes)?;
        let mut tape = Tape::new();
        let dz = self.net.cfg.latent_dim;
        let z = match mode {
            GenerateMode::Reconstruct => self.net.encode(&mut tape, &self.params, &ext, &self.stats, None)?.mu,
            GenerateMode::Sample => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let draws = (0..ext.len() * dz).map(|_| rng.sample(StandardNormal)).collect();
                tape.leaf(Tensor::new(vec![ext.len(), dz], draws)?)?
            }
        };
        let dec = self.net.decode(&mut tape, &self.params, z, &ext)?;
        let (boxes, yaw, shapes) = (tape.value(dec.boxes), tape.value(dec.yaw_logits), tape.value(dec.shapes));
        let bins = self.net.cfg.yaw_bins;
        let nodes = (0..ext.len())
            .map(|k| {
                let y = yaw_center(argmax(yaw.row_slice(k)), bins);
                let shape_code = shapes.row_slice(k).to_vec();
                if !shape_code.iter().all(|v| v.is_finite()) {
                    return Err(Error::Validation(format!("non-finite shape code for node {}", ext.ids[k])));
                }
                Ok(LayoutNode {
                    id: ext.ids[k],
                    class: self.vocab.objects[ext.classes[k]].clone(),
                    obb: self.stats.decode(boxes.row_slice(k), y)?,
                    shape_code,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Layout { nodes })
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "gen",
            "config": self.net.cfg,
            "vocab": self.vocab,
            "embedder": self.embedder,
            "stats": self.stats,
            "class_priors": self.class_priors,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.named_tensors(), self.meta())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("gen") {
            return Err(Error::Checkpoint("not a generator checkpoint".into()));
        }
        fn field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
            serde_json::from_value(meta[key].clone()).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
        }
        let cfg: GenConfig = field(&ck.meta, "config")?;
        let mut m = GenModel::new(
            cfg,
            field(&ck.meta, "vocab")?,
            field(&ck.meta, "stats")?,
            field(&ck.meta, "class_priors")?,
            0,
        )?;
        m.embedder = field(&ck.meta, "embedder")?;
        m.params.load_named(&ck.tensors)?;
        Ok(m)
    }
}
