//! Scene-graph predictor.
//!
//! Per entity, a shared point MLP with max-pooling encodes the surface points
//! and a sigmoid gate mixes them into the projected image feature; box
//! dimensions, centroid and yaw are appended. Directed edges over the neighbor
//! graph start from an MLP over both node features and the pose descriptor.
//! Message passing uses cross-check feature attention: for edge `(i, j)`,
//! `W_ij = A(N_i, E_ij, N_j) + A(N_j, E_ij, N_i)` with one shared attention
//! `A(q, k, v)`, the message is `W_ij ⊙ N_j`, and node `i` averages the
//! messages of its outgoing edges. The last layer updates nodes and edges
//! through GRU cells; softmax heads give class and predicate distributions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{cross_entropy, mean_by, Activation, Adjacency, GruCell, Linear, Mlp, MultiHeadAttention};
use crate::autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::data::EntityInput;
use crate::error::{Error, Result};
use crate::geometry::{neighbor_pairs, pose_descriptor};
use crate::graph::{ClassDistribution, NodeId, SceneGraph, SceneGraphEdge, SceneGraphNode, Vocab};

/// Appended geometry per node: dims (3), centroid (3), yaw (1).
pub const GEOMETRY_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgpConfig {
    pub image_dim: usize,
    pub image_proj: usize,
    pub point_hidden: usize,
    pub point_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub objects: usize,
    pub predicates: usize,
}

impl SgpConfig {
    pub fn from_config(cfg: &crate::config::Config, objects: usize, predicates: usize) -> Self {
        SgpConfig {
            image_dim: cfg.image_dim,
            image_proj: cfg.sgp_image_proj,
            point_hidden: cfg.sgp_point_hidden,
            point_dim: cfg.sgp_point_dim,
            model_dim: cfg.sgp_model_dim,
            heads: cfg.sgp_heads,
            layers: cfg.sgp_layers,
            objects,
            predicates,
        }
    }

    /// Length of the raw node feature.
    pub fn node_dim(&self) -> usize {
        self.image_proj + GEOMETRY_DIM
    }
}

/// Tensors for one scene, with entities in input order.
#[derive(Debug, Clone)]
pub struct SgpInput {
    pub ids: Vec<NodeId>,
    pub image: Tensor,
    /// Points centered on their box centroid, all entities stacked.
    pub points: Tensor,
    pub point_owner: Vec<usize>,
    pub geometry: Tensor,
    pub adj: Adjacency,
    /// Pose descriptors per directed edge.
    pub pose: Tensor,
}

impl SgpInput {
    /// Builds the neighbor graph with `margin` and stacks all inputs.
    pub fn new(entities: &[EntityInput], margin: f64) -> Result<Self> {
        let boxes: Vec<_> = entities.iter().map(|e| e.obb).collect();
        let pairs = neighbor_pairs(&boxes, margin)?;
        Self::with_edges(entities, &pairs)
    }

    pub fn with_edges(entities: &[EntityInput], pairs: &[(usize, usize)]) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Validation("prediction needs at least one entity".into()));
        }
        let fdim = entities[0].image_feat.len();
        let mut image = Vec::with_capacity(entities.len() * fdim);
        let mut points = Vec::new();
        let mut owner = Vec::new();
        let mut geometry = Vec::with_capacity(entities.len() * GEOMETRY_DIM);
        for (k, e) in entities.iter().enumerate() {
            e.validate()?;
            if e.image_feat.len() != fdim {
                return Err(Error::Validation(format!(
                    "entity {} image feature has length {}, expected {fdim}",
                    e.id,
                    e.image_feat.len()
                )));
            }
            image.extend_from_slice(&e.image_feat);
            let c = e.obb.centroid();
            for p in &e.points {
                points.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
                owner.push(k);
            }
            geometry.extend_from_slice(&e.obb.dims());
            geometry.extend_from_slice(&c);
            geometry.push(e.obb.yaw());
        }
        let pose: Vec<f64> = pairs
            .iter()
            .flat_map(|&(i, j)| pose_descriptor(&entities[i].obb, &entities[j].obb))
            .collect();
        let n = entities.len();
        Ok(SgpInput {
            ids: entities.iter().map(|e| e.id).collect(),
            image: Tensor::new(vec![n, fdim], image)?,
            points: Tensor::new(vec![owner.len(), 3], points)?,
            point_owner: owner,
            geometry: Tensor::new(vec![n, GEOMETRY_DIM], geometry)?,
            adj: Adjacency::new(n, pairs)?,
            pose: Tensor::new(vec![pairs.len(), 6], pose)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }
}

/// One cross-check attention message-passing round.
#[derive(Debug, Clone)]
pub struct CcfaLayer {
    pub attn: MultiHeadAttention,
    pub edge_update: Linear,
    pub node_update: Option<Linear>,
    pub node_gru: Option<GruCell>,
    pub edge_gru: Option<GruCell>,
}

impl CcfaLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, last: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?;
        let edge_update = Linear::new(store, &format!("{name}.edge_update"), 3 * d, d, rng)?;
        let (node_update, node_gru, edge_gru) = if last {
            (
                None,
                Some(GruCell::new(store, &format!("{name}.node_gru"), d, d, rng)?),
                Some(GruCell::new(store, &format!("{name}.edge_gru"), d, d, rng)?),
            )
        } else {
            (Some(Linear::new(store, &format!("{name}.node_update"), 2 * d, d, rng)?), None, None)
        };
        Ok(CcfaLayer {
            attn,
            edge_update,
            node_update,
            node_gru,
            edge_gru,
        })
    }

    /// `W = A(a, e, b) + A(b, e, a)` row by row.
    pub fn cross_check(&self, tape: &mut Tape, store: &ParamStore, a: Var, e: Var, b: Var) -> Result<Var> {
        let ab = self.attn.feature_wise(tape, store, a, e, b)?;
        let ba = self.attn.feature_wise(tape, store, b, e, a)?;
        Ok(tape.add(ab, ba)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        e: Option<Var>,
        adj: &Adjacency,
    ) -> Result<(Var, Option<Var>)> {
        let n = adj.n;
        let d = tape.shape(h)[1];
        let (agg, new_e) = match e {
            Some(e) if adj.num_edges() > 0 => {
                let hs = tape.gather_rows(h, &adj.src)?;
                let hd = tape.gather_rows(h, &adj.dst)?;
                let w = self.cross_check(tape, store, hs, e, hd)?;
                let m = tape.mul(w, hd)?;
                let agg = mean_by(tape, m, &adj.src, &adj.inv_counts(&adj.src), n)?;
                let cat = tape.concat(&[hs, e, hd], 1)?;
                let u = self.edge_update.forward(tape, store, cat)?;
                (agg, Some((e, tape.relu(u)?)))
            }
            _ => (tape.leaf(Tensor::zeros(&[n, d]))?, None),
        };
        match (&self.node_update, &self.node_gru, &self.edge_gru) {
            (Some(lin), _, _) => {
                let cat = tape.concat(&[h, agg], 1)?;
                let h2 = lin.forward(tape, store, cat)?;
                Ok((tape.relu(h2)?, new_e.map(|(_, u)| u)))
            }
            (None, Some(ng), Some(eg)) => {
                let h2 = ng.forward(tape, store, h, agg)?;
                let e2 = match new_e {
                    Some((e, u)) => Some(eg.forward(tape, store, e, u)?),
                    None => None,
                };
                Ok((h2, e2))
            }
            _ => unreachable!("a layer has either a linear update or both GRU cells"),
        }
    }
}

/// Parameter handles of the predictor.
#[derive(Debug, Clone)]
pub struct SgpNet {
    pub cfg: SgpConfig,
    pub point_mlp: Mlp,
    pub image_proj: Linear,
    pub point_proj: Linear,
    pub gate: Linear,
    pub edge_mlp: Mlp,
    pub node_proj: Linear,
    pub layers: Vec<CcfaLayer>,
    pub object_head: Mlp,
    pub predicate_head: Mlp,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SgpOutput {
    pub node_logits: Var,
    pub edge_logits: Option<Var>,
    pub node_state: Var,
    pub edge_state: Option<Var>,
}

impl SgpNet {
    pub fn new(store: &mut ParamStore, cfg: SgpConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let d = cfg.model_dim;
        let f = cfg.node_dim();
        let point_mlp = Mlp::new(store, "sgp.point_mlp", &[3, cfg.point_hidden, cfg.point_dim], Activation::Relu, Activation::Relu, r)?;
        let image_proj = Linear::new(store, "sgp.image_proj", cfg.image_dim, cfg.image_proj, r)?;
        let point_proj = Linear::new(store, "sgp.point_proj", cfg.point_dim, cfg.image_proj, r)?;
        let gate = Linear::new(store, "sgp.gate", cfg.point_dim, cfg.image_proj, r)?;
        let edge_mlp = Mlp::new(store, "sgp.edge_mlp", &[2 * f + 6, d, d], Activation::Relu, Activation::None, r)?;
        let node_proj = Linear::new(store, "sgp.node_proj", f, d, r)?;
        let layers = (0..cfg.layers)
            .map(|l| CcfaLayer::new(store, &format!("sgp.ccfa{l}"), d, cfg.heads, l + 1 == cfg.layers, r))
            .collect::<Result<_>>()?;
        let object_head = Mlp::new(store, "sgp.object_head", &[d, d, cfg.objects], Activation::Relu, Activation::None, r)?;
        let predicate_head = Mlp::new(store, "sgp.predicate_head", &[d, d, cfg.predicates], Activation::Relu, Activation::None, r)?;
        Ok(SgpNet {
            cfg,
            point_mlp,
            image_proj,
            point_proj,
            gate,
            edge_mlp,
            node_proj,
            layers,
            object_head,
            predicate_head,
        })
    }

    /// Max-pooled point features `[N, point_dim]`.
    pub fn encode_points(&self, tape: &mut Tape, store: &ParamStore, input: &SgpInput) -> Result<Var> {
        let p = tape.leaf(input.points.clone())?;
        let f = self.point_mlp.forward(tape, store, p)?;
        Ok(tape.segment_max(f, &input.point_owner, input.num_nodes())?)
    }

    /// Raw node features `[N, image_proj + 7]`.
    pub fn node_features(&self, tape: &mut Tape, store: &ParamStore, input: &SgpInput) -> Result<Var> {
        let pts = self.encode_points(tape, store, input)?;
        let img = tape.leaf(input.image.clone())?;
        let img = self.image_proj.forward(tape, store, img)?;
        let g = self.gate.forward(tape, store, pts)?;
        let g = tape.sigmoid(g)?;
        let pp = self.point_proj.forward(tape, store, pts)?;
        let gated = tape.mul(g, pp)?;
        let fused = tape.add(img, gated)?;
        let geo = tape.leaf(input.geometry.clone())?;
        Ok(tape.concat(&[fused, geo], 1)?)
    }

    /// Edge features `[E, model_dim]` from raw node features.
    pub fn edge_features(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, input: &SgpInput) -> Result<Option<Var>> {
        if input.adj.num_edges() == 0 {
            return Ok(None);
        }
        let ni = tape.gather_rows(nodes, &input.adj.src)?;
        let nj = tape.gather_rows(nodes, &input.adj.dst)?;
        let pose = tape.leaf(input.pose.clone())?;
        let cat = tape.concat(&[ni, nj, pose], 1)?;
        Ok(Some(self.edge_mlp.forward(tape, store, cat)?))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &SgpInput) -> Result<SgpOutput> {
        let raw = self.node_features(tape, store, input)?;
        let mut e = self.edge_features(tape, store, raw, input)?;
        let mut h = self.node_proj.forward(tape, store, raw)?;
        for layer in &self.layers {
            (h, e) = layer.forward(tape, store, h, e, &input.adj)?;
        }
        let node_logits = self.object_head.forward(tape, store, h)?;
        let edge_logits = match e {
            Some(e) => Some(self.predicate_head.forward(tape, store, e)?),
            None => None,
        };
        Ok(SgpOutput {
            node_logits,
            edge_logits,
            node_state: h,
            edge_state: e,
        })
    }

    /// Mean node cross-entropy plus mean edge cross-entropy. Edges without a
    /// label (`None`) are left out; with no labelled edge only the node term
    /// remains.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &SgpInput,
        node_targets: &[usize],
        edge_targets: &[Option<usize>],
    ) -> Result<Var> {
        let out = self.forward(tape, store, input)?;
        sgp_loss(tape, &out, node_targets, edge_targets)
    }
}

pub fn sgp_loss(tape: &mut Tape, out: &SgpOutput, node_targets: &[usize], edge_targets: &[Option<usize>]) -> Result<Var> {
    let node = cross_entropy(tape, out.node_logits, node_targets)?;
    let rows: Vec<usize> = (0..edge_targets.len()).filter(|k| edge_targets[*k].is_some()).collect();
    let Some(logits) = out.edge_logits.filter(|_| !rows.is_empty()) else {
        return Ok(node);
    };
    if tape.shape(logits)[0] != edge_targets.len() {
        return Err(Error::Validation("edge targets do not match the edge count".into()));
    }
    let picked = tape.gather_rows(logits, &rows)?;
    let targets: Vec<usize> = rows.iter().map(|k| edge_targets[*k].expect("filtered")).collect();
    let edge = cross_entropy(tape, picked, &targets)?;
    Ok(tape.add(node, edge)?)
}

/// Class and predicate targets for `input` from a ground-truth graph over the
/// same ids.
pub fn targets_from_graph(input: &SgpInput, gt: &SceneGraph) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let nodes = input
        .ids
        .iter()
        .map(|id| {
            gt.node(*id)
                .map(|n| n.class_dist.argmax())
                .ok_or_else(|| Error::Validation(format!("ground truth lacks node {id}")))
        })
        .collect::<Result<_>>()?;
    let labels: BTreeMap<(NodeId, NodeId), usize> =
        gt.edges.iter().map(|e| ((e.src, e.dst), e.predicate_dist.argmax())).collect();
    let edges = input
        .adj
        .src
        .iter()
        .zip(&input.adj.dst)
        .map(|(&s, &d)| labels.get(&(input.ids[s], input.ids[d])).copied())
        .collect();
    Ok((nodes, edges))
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// [`SgpModel::predict`] with the parts passed separately.
pub fn predict_graph(
    net: &SgpNet,
    params: &ParamStore,
    vocab: &Vocab,
    margin: f64,
    entities: &[EntityInput],
) -> Result<SceneGraph> {
    let input = SgpInput::new(entities, margin)?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, params, &input)?;
    let node_p = softmax_rows(tape.value(out.node_logits));
    let node_f = tape.value(out.node_state);
    let nodes = entities
        .iter()
        .enumerate()
        .map(|(k, e)| {
            Ok(SceneGraphNode {
                id: e.id,
                class_dist: ClassDistribution::normalized(node_p[k].clone())?,
                obb: e.obb,
                feature: node_f.row_slice(k).to_vec(),
                fusion_weight: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    let mut edges = Vec::with_capacity(input.adj.num_edges());
    if let (Some(l), Some(s)) = (out.edge_logits, out.edge_state) {
        let p = softmax_rows(tape.value(l));
        let f = tape.value(s);
        for k in 0..input.adj.num_edges() {
            edges.push(SceneGraphEdge {
                src: input.ids[input.adj.src[k]],
                dst: input.ids[input.adj.dst[k]],
                predicate_dist: ClassDistribution::normalized(p[k].clone())?,
                feature: f.row_slice(k).to_vec(),
                fusion_weight: 1.0,
            });
        }
    }
    SceneGraph::new(vocab.clone(), nodes, edges)
}

/// A trained predictor: architecture, parameters and vocabulary.
#[derive(Debug, Clone)]
pub struct SgpModel {
    pub net: SgpNet,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub margin: f64,
}

impl SgpModel {
    pub fn new(cfg: SgpConfig, vocab: Vocab, margin: f64, seed: u64) -> Result<Self> {
        if cfg.objects != vocab.objects.len() || cfg.predicates != vocab.predicates.len() {
            return Err(Error::Validation("head sizes differ from the vocabulary".into()));
        }
        let mut params = ParamStore::new();
        let net = SgpNet::new(&mut params, cfg, seed)?;
        Ok(SgpModel {
            net,
            params,
            vocab,
            margin,
        })
    }

    /// Predicted scene graph: softmax distributions on every node and
    /// neighbor edge, final hidden states as features, unit fusion weights.
    pub fn predict(&self, entities: &[EntityInput]) -> Result<SceneGraph> {
        predict_graph(&self.net, &self.params, &self.vocab, self.margin, entities)
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "sgp",
            "config": self.net.cfg,
            "vocab": self.vocab,
            "margin": self.margin,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.named_tensors(), self.meta())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("sgp") {
            return Err(Error::Checkpoint("not a predictor checkpoint".into()));
        }
        let cfg: SgpConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let vocab: Vocab = serde_json::from_value(ck.meta["vocab"].clone())
            .map_err(|e| Error::Checkpoint(format!("vocab: {e}")))?;
        let margin = ck.meta["margin"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("missing margin".into()))?;
        let mut m = SgpModel::new(cfg, vocab, margin, 0)?;
        m.params.load_named(&ck.tensors)?;
        Ok(m)
    }
}
