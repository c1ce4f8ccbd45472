//! Scene-graph data model and its JSON exchange format.
//!
//! JSON layout (keys emitted in this order):
//!
//! ```text
//! { "vocab": {"objects": [...], "predicates": [...]},
//!   "nodes": [{"id", "class_probs" | "class", "obb", "feature"?, "phi"?}],
//!   "edges": [{"src", "dst", "pred_probs" | "pred", "feature"?, "phi"?}] }
//! ```
//!
//! On input a node may name its class instead of giving probabilities, which
//! becomes a one-hot distribution. Output always writes probabilities.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{neighbor_pairs, Obb};

/// Upper bound on any fusion weight.
pub const PHI_MAX: f64 = 100.0;

const NORMALIZATION_TOL: f64 = 1e-9;

pub type NodeId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
}

impl Vocab {
    pub fn new(objects: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        for (kind, names) in [("object", &objects), ("predicate", &predicates)] {
            if names.is_empty() {
                return Err(Error::Graph(format!("{kind} vocabulary is empty")));
            }
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::Graph(format!("duplicate {kind} class name")));
            }
        }
        Ok(Vocab {
            objects,
            predicates,
        })
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p == name)
    }
}

/// A probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Graph("empty class distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Graph(format!(
                "class probabilities must be finite and >= 0: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Graph(format!(
                "class probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ClassDistribution(probs))
    }

    /// Divides by the sum. Fails when the input has no positive mass.
    pub fn normalized(mut probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::Graph("cannot normalize a zero-mass vector".into()));
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        ClassDistribution::new(probs)
    }

    pub fn one_hot(index: usize, len: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        ClassDistribution(v)
    }

    pub fn uniform(len: usize) -> Self {
        ClassDistribution(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Lowest index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphNode {
    pub id: NodeId,
    pub class_dist: ClassDistribution,
    pub obb: Obb,
    pub feature: Vec<f64>,
    pub fusion_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub predicate_dist: ClassDistribution,
    pub feature: Vec<f64>,
    pub fusion_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub vocab: Vocab,
    pub nodes: Vec<SceneGraphNode>,
    pub edges: Vec<SceneGraphEdge>,
}

impl SceneGraph {
    pub fn empty(vocab: Vocab) -> Self {
        SceneGraph {
            vocab,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Builds a validated graph.
    pub fn new(vocab: Vocab, nodes: Vec<SceneGraphNode>, edges: Vec<SceneGraphEdge>) -> Result<Self> {
        let g = SceneGraph {
            vocab,
            nodes,
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(Error::Graph(format!("duplicate node id {}", n.id)));
            }
            if n.class_dist.len() != self.vocab.objects.len() {
                return Err(Error::Graph(format!(
                    "node {} class distribution has length {}, vocabulary has {}",
                    n.id,
                    n.class_dist.len(),
                    self.vocab.objects.len()
                )));
            }
            check_phi(n.fusion_weight, || format!("node {}", n.id))?;
        }
        let mut pairs = BTreeSet::new();
        for e in &self.edges {
            if e.src == e.dst {
                return Err(Error::Graph(format!("self edge on node {}", e.src)));
            }
            if !ids.contains(&e.src) || !ids.contains(&e.dst) {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) references a missing node",
                    e.src, e.dst
                )));
            }
            if !pairs.insert((e.src, e.dst)) {
                return Err(Error::Graph(format!("duplicate edge ({}, {})", e.src, e.dst)));
            }
            if e.predicate_dist.len() != self.vocab.predicates.len() {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) predicate distribution has length {}, vocabulary has {}",
                    e.src,
                    e.dst,
                    e.predicate_dist.len(),
                    self.vocab.predicates.len()
                )));
            }
            check_phi(e.fusion_weight, || format!("edge ({}, {})", e.src, e.dst))?;
        }
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Option<&SceneGraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Map from node id to position in `nodes`.
    pub fn index_of(&self) -> BTreeMap<NodeId, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    /// Edges as node-index pairs, in edge order.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        let idx = self.index_of();
        self.edges.iter().map(|e| (idx[&e.src], idx[&e.dst])).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GraphJson::from(self))?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: GraphJson = serde_json::from_str(s)?;
        raw.into_graph()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_phi(phi: f64, what: impl Fn() -> String) -> Result<()> {
    if !(0.0..=PHI_MAX).contains(&phi) {
        return Err(Error::Graph(format!(
            "{} fusion weight {phi} outside [0, {PHI_MAX}]",
            what()
        )));
    }
    Ok(())
}

/// Directed neighbor edges between graph nodes, as id pairs.
pub fn neighbor_graph(nodes: &[SceneGraphNode], margin: f64) -> Result<Vec<(NodeId, NodeId)>> {
    let boxes: Vec<Obb> = nodes.iter().map(|n| n.obb).collect();
    Ok(neighbor_pairs(&boxes, margin)?
        .into_iter()
        .map(|(i, j)| (nodes[i].id, nodes[j].id))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct GraphJson {
    vocab: Vocab,
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeJson {
    id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    obb: Obb,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeJson {
    src: NodeId,
    dst: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
}

impl From<&SceneGraph> for GraphJson {
    fn from(g: &SceneGraph) -> Self {
        GraphJson {
            vocab: g.vocab.clone(),
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeJson {
                    id: n.id,
                    class_probs: Some(n.class_dist.probs().to_vec()),
                    class: None,
                    obb: n.obb,
                    feature: n.feature.clone(),
                    phi: Some(n.fusion_weight),
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeJson {
                    src: e.src,
                    dst: e.dst,
                    pred_probs: Some(e.predicate_dist.probs().to_vec()),
                    pred: None,
                    feature: e.feature.clone(),
                    phi: Some(e.fusion_weight),
                })
                .collect(),
        }
    }
}

fn resolve_dist(
    probs: Option<Vec<f64>>,
    label: Option<String>,
    names: &[String],
    what: &str,
) -> Result<ClassDistribution> {
    match (probs, label) {
        (Some(p), _) => ClassDistribution::new(p),
        (None, Some(name)) => names
            .iter()
            .position(|n| *n == name)
            .map(|i| ClassDistribution::one_hot(i, names.len()))
            .ok_or_else(|| Error::Graph(format!("unknown {what} class {name:?}"))),
        (None, None) => Err(Error::Graph(format!("{what} has neither probabilities nor a label"))),
    }
}

impl GraphJson {
    pub(crate) fn into_graph(self) -> Result<SceneGraph> {
        let vocab = Vocab::new(self.vocab.objects, self.vocab.predicates)?;
        let nodes = self
            .nodes
            .into_iter()
            .map(|n| {
                Ok(SceneGraphNode {
                    id: n.id,
                    class_dist: resolve_dist(n.class_probs, n.class, &vocab.objects, "object")?,
                    obb: n.obb,
                    feature: n.feature,
                    fusion_weight: n.phi.unwrap_or(1.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = self
            .edges
            .into_iter()
            .map(|e| {
                Ok(SceneGraphEdge {
                    src: e.src,
                    dst: e.dst,
                    predicate_dist: resolve_dist(e.pred_probs, e.pred, &vocab.predicates, "predicate")?,
                    feature: e.feature,
                    fusion_weight: e.phi.unwrap_or(1.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneGraph::new(vocab, nodes, edges)
    }
}

// Serde entry points so other records can embed a graph directly.
impl Serialize for SceneGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        GraphJson::deserialize(d)?
            .into_graph()
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(
            vec!["chair".into(), "table".into()],
            vec!["left".into(), "right".into()],
        )
        .unwrap()
    }

    fn node(id: NodeId, cls: usize) -> SceneGraphNode {
        SceneGraphNode {
            id,
            class_dist: ClassDistribution::one_hot(cls, 2),
            obb: Obb::new([id as f64, 0.0, 0.5], [1.0; 3], 0.0).unwrap(),
            feature: vec![],
            fusion_weight: 1.0,
        }
    }

    fn edge(src: NodeId, dst: NodeId) -> SceneGraphEdge {
        SceneGraphEdge {
            src,
            dst,
            predicate_dist: ClassDistribution::uniform(2),
            feature: vec![0.25, -1.5],
            fusion_weight: 3.0,
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::normalized(vec![0.0, 0.0]).is_err());
        assert_eq!(ClassDistribution::uniform(4).argmax(), 0);
        assert_eq!(ClassDistribution::new(vec![0.2, 0.4, 0.4]).unwrap().argmax(), 1);
    }

    #[test]
    fn graph_validation_errors() {
        let v = vocab();
        assert!(SceneGraph::new(v.clone(), vec![node(1, 0), node(1, 1)], vec![]).is_err());
        assert!(SceneGraph::new(v.clone(), vec![node(1, 0)], vec![edge(1, 1)]).is_err());
        assert!(SceneGraph::new(v.clone(), vec![node(1, 0)], vec![edge(1, 2)]).is_err());
        assert!(SceneGraph::new(
            v.clone(),
            vec![node(1, 0), node(2, 0)],
            vec![edge(1, 2), edge(1, 2)]
        )
        .is_err());
        let mut bad = node(3, 0);
        bad.fusion_weight = 101.0;
        assert!(SceneGraph::new(v, vec![bad], vec![]).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut n = node(7, 1);
        n.feature = vec![0.1, 1.0 / 3.0, -2e-300];
        n.class_dist = ClassDistribution::new(vec![0.3, 0.7]).unwrap();
        let g = SceneGraph::new(vocab(), vec![n, node(9, 0)], vec![edge(7, 9)]).unwrap();
        let text = g.to_json().unwrap();
        let back = SceneGraph::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn json_accepts_labels() {
        let text = r#"{"vocab":{"objects":["chair","table"],"predicates":["left","right"]},
            "nodes":[{"id":1,"class":"table","obb":{"centroid":[0,0,0],"dims":[1,1,1],"yaw":0}},
                     {"id":2,"class":"chair","obb":{"centroid":[2,0,0],"dims":[1,1,1],"yaw":0}}],
            "edges":[{"src":1,"dst":2,"pred":"left"}]}"#;
        let g = SceneGraph::from_json(text).unwrap();
        assert_eq!(g.nodes[0].class_dist.argmax(), 1);
        assert_eq!(g.edges[0].predicate_dist.argmax(), 0);
        assert_eq!(g.nodes[0].fusion_weight, 1.0);
        let bad = text.replace("\"pred\":\"left\"", "\"pred\":\"under\"");
        assert!(SceneGraph::from_json(&bad).is_err());
    }
}
