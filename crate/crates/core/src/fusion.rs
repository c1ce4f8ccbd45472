//! Incremental fusion of per-timestep scene graphs into one global graph.
//!
//! Every attribute is a confidence-weighted running mean:
//! `u = (u_t φ_t + u_prev φ_prev) / (φ_t + φ_prev)`, and the confidence grows as
//! `φ = min(φ_max, φ_t + φ_prev)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Obb;
use crate::graph::{ClassDistribution, NodeId, SceneGraph, SceneGraphEdge, SceneGraphNode, Vocab, PHI_MAX};

/// One weighted moving-average step. Returns the fused vector and weight.
pub fn fuse_value(u_t: &[f64], phi_t: f64, u_prev: &[f64], phi_prev: f64, phi_max: f64) -> Result<(Vec<f64>, f64)> {
    if !(phi_t > 0.0) || !phi_t.is_finite() {
        return Err(Error::Validation(format!("observation weight must be positive, got {phi_t}")));
    }
    if !(phi_prev >= 0.0) {
        return Err(Error::Validation(format!("prior weight must be nonnegative, got {phi_prev}")));
    }
    if u_t.len() != u_prev.len() {
        return Err(Error::Validation(format!(
            "cannot fuse vectors of length {} and {}",
            u_t.len(),
            u_prev.len()
        )));
    }
    let w = phi_t + phi_prev;
    let u = u_t
        .iter()
        .zip(u_prev)
        .map(|(a, b)| (a * phi_t + b * phi_prev) / w)
        .collect();
    Ok((u, phi_max.min(w)))
}

/// φ-weighted circular mean of two angles.
pub fn fuse_yaw(yaw_t: f64, phi_t: f64, yaw_prev: f64, phi_prev: f64) -> f64 {
    let s = phi_t * yaw_t.sin() + phi_prev * yaw_prev.sin();
    let c = phi_t * yaw_t.cos() + phi_prev * yaw_prev.cos();
    s.atan2(c)
}

/// Where a local node goes in the global graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Global(NodeId),
    New(NewMarker),
}

/// Serialized as the string `"new"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NewMarker {
    New,
}

impl Target {
    pub const NEW: Target = Target::New(NewMarker::New);
}

pub type Correspondences = BTreeMap<NodeId, Target>;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub global: SceneGraph,
    /// Local id to global id, as resolved by the most recent fuse.
    pub id_map: BTreeMap<NodeId, NodeId>,
    pub phi_max: f64,
}

fn fuse_dist(a: &ClassDistribution, pa: f64, b: &ClassDistribution, pb: f64, cap: f64) -> Result<ClassDistribution> {
    let (u, _) = fuse_value(a.probs(), pa, b.probs(), pb, cap)?;
    ClassDistribution::normalized(u)
}

fn fuse_feature(a: &[f64], pa: f64, b: &[f64], pb: f64, cap: f64) -> Result<Vec<f64>> {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => Ok(b.to_vec()),
        (_, true) => Ok(a.to_vec()),
        _ => Ok(fuse_value(a, pa, b, pb, cap)?.0),
    }
}

fn fuse_obb(a: &Obb, pa: f64, b: &Obb, pb: f64, cap: f64) -> Result<Obb> {
    let (c, _) = fuse_value(&a.centroid(), pa, &b.centroid(), pb, cap)?;
    let (d, _) = fuse_value(&a.dims(), pa, &b.dims(), pb, cap)?;
    Obb::new(
        [c[0], c[1], c[2]],
        [d[0], d[1], d[2]],
        fuse_yaw(a.yaw(), pa, b.yaw(), pb),
    )
}

impl FusionState {
    pub fn new(vocab: Vocab) -> Self {
        FusionState {
            global: SceneGraph::empty(vocab),
            id_map: BTreeMap::new(),
            phi_max: PHI_MAX,
        }
    }

    /// Fuses `local` into the global graph. Without `correspondences`, local
    /// ids are matched to equal global ids and otherwise inserted. On error
    /// the state is unchanged.
    pub fn fuse(&mut self, local: &SceneGraph, correspondences: Option<&Correspondences>) -> Result<()> {
        if local.vocab != self.global.vocab {
            return Err(Error::Validation("local graph vocabulary differs from the global graph".into()));
        }
        local.validate()?;
        let mut g = self.global.clone();
        let cap = self.phi_max;
        let mut index = g.index_of();
        let mut id_map = BTreeMap::new();
        let mut next_id = g.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0);

        for n in &local.nodes {
            let target = match correspondences {
                Some(c) => *c.get(&n.id).ok_or_else(|| {
                    Error::Validation(format!("no correspondence given for local node {}", n.id))
                })?,
                None if index.contains_key(&n.id) => Target::Global(n.id),
                None => Target::NEW,
            };
            let gid = match target {
                Target::Global(gid) => {
                    let &i = index
                        .get(&gid)
                        .ok_or_else(|| Error::Validation(format!("correspondence to nonexistent global node {gid}")))?;
                    let prev = &g.nodes[i];
                    let (pt, pp) = (n.fusion_weight, prev.fusion_weight);
                    let fused = SceneGraphNode {
                        id: gid,
                        class_dist: fuse_dist(&n.class_dist, pt, &prev.class_dist, pp, cap)?,
                        obb: fuse_obb(&n.obb, pt, &prev.obb, pp, cap)?,
                        feature: fuse_feature(&n.feature, pt, &prev.feature, pp, cap)?,
                        fusion_weight: fuse_value(&[], pt, &[], pp, cap)?.1,
                    };
                    g.nodes[i] = fused;
                    gid
                }
                Target::New(_) => {
                    if !(n.fusion_weight > 0.0) {
                        return Err(Error::Validation(format!("local node {} has zero weight", n.id)));
                    }
                    let gid = if index.contains_key(&n.id) { next_id } else { n.id };
                    next_id = next_id.max(gid + 1);
                    let mut node = n.clone();
                    node.id = gid;
                    index.insert(gid, g.nodes.len());
                    g.nodes.push(node);
                    gid
                }
            };
            if id_map.insert(n.id, gid).is_some() {
                unreachable!("local ids are unique after validation");
            }
        }
        if id_map.values().collect::<std::collections::BTreeSet<_>>().len() != id_map.len() {
            return Err(Error::Validation("two local nodes map to the same global node".into()));
        }

        let mut edge_index: BTreeMap<(NodeId, NodeId), usize> =
            g.edges.iter().enumerate().map(|(i, e)| ((e.src, e.dst), i)).collect();
        for e in &local.edges {
            let (s, d) = (id_map[&e.src], id_map[&e.dst]);
            match edge_index.get(&(s, d)) {
                Some(&i) => {
                    let prev = &g.edges[i];
                    let (pt, pp) = (e.fusion_weight, prev.fusion_weight);
                    g.edges[i] = SceneGraphEdge {
                        src: s,
                        dst: d,
                        predicate_dist: fuse_dist(&e.predicate_dist, pt, &prev.predicate_dist, pp, cap)?,
                        feature: fuse_feature(&e.feature, pt, &prev.feature, pp, cap)?,
                        fusion_weight: fuse_value(&[], pt, &[], pp, cap)?.1,
                    };
                }
                None => {
                    if !(e.fusion_weight > 0.0) {
                        return Err(Error::Validation(format!("local edge ({}, {}) has zero weight", e.src, e.dst)));
                    }
                    let mut edge = e.clone();
                    edge.src = s;
                    edge.dst = d;
                    edge_index.insert((s, d), g.edges.len());
                    g.edges.push(edge);
                }
            }
        }
        g.validate()?;
        self.global = g;
        self.id_map = id_map;
        Ok(())
    }
}
