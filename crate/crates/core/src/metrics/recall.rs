//! Top-1 recall of predicted scene graphs against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{argmax, NodeId, SceneGraph, SceneGraphEdge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub class: String,
    pub hits: usize,
    pub total: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall_rel: f64,
    pub recall_obj: f64,
    pub recall_pred: f64,
    pub mrecall_obj: f64,
    pub mrecall_pred: f64,
    pub per_class_obj: Vec<ClassRecall>,
    pub per_class_pred: Vec<ClassRecall>,
}

/// Hit counts, poolable across scenes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecallCounts {
    obj: BTreeMap<usize, (usize, usize)>,
    pred: BTreeMap<usize, (usize, usize)>,
    rel: (usize, usize),
}

fn bump(map: &mut BTreeMap<usize, (usize, usize)>, class: usize, hit: bool) {
    let c = map.entry(class).or_insert((0, 0));
    c.0 += hit as usize;
    c.1 += 1;
}

fn ratio(h: usize, t: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        h as f64 / t as f64
    }
}

impl RecallCounts {
    pub fn merge(&mut self, other: &RecallCounts) {
        for (dst, src) in [(&mut self.obj, &other.obj), (&mut self.pred, &other.pred)] {
            for (k, (h, t)) in src {
                let c = dst.entry(*k).or_insert((0, 0));
                c.0 += h;
                c.1 += t;
            }
        }
        self.rel.0 += other.rel.0;
        self.rel.1 += other.rel.1;
    }

    pub fn report(&self, objects: &[String], predicates: &[String]) -> RecallReport {
        let table = |map: &BTreeMap<usize, (usize, usize)>, names: &[String]| -> Vec<ClassRecall> {
            map.iter()
                .map(|(k, (h, t))| ClassRecall {
                    class: names.get(*k).cloned().unwrap_or_else(|| k.to_string()),
                    hits: *h,
                    total: *t,
                    recall: ratio(*h, *t),
                })
                .collect()
        };
        let pooled = |map: &BTreeMap<usize, (usize, usize)>| {
            let (h, t) = map.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            ratio(h, t)
        };
        let mean = |rows: &[ClassRecall]| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| r.recall).sum::<f64>() / rows.len() as f64
            }
        };
        let per_class_obj = table(&self.obj, objects);
        let per_class_pred = table(&self.pred, predicates);
        RecallReport {
            recall_rel: ratio(self.rel.0, self.rel.1),
            recall_obj: pooled(&self.obj),
            recall_pred: pooled(&self.pred),
            mrecall_obj: mean(&per_class_obj),
            mrecall_pred: mean(&per_class_pred),
            per_class_obj,
            per_class_pred,
        }
    }
}

/// Top-1 `(subject, predicate, object)` choice maximizing the product of the
/// three probabilities. The product is separable, so each factor's argmax
/// (ties to the lowest index) gives the lexicographically first maximizer.
pub fn top_triplet(subject: &[f64], predicate: &[f64], object: &[f64]) -> (usize, usize, usize) {
    (argmax(subject), argmax(predicate), argmax(object))
}

/// Counts hits for one scene. `correspondence` maps ground-truth node ids to
/// predicted node ids; `None` uses identical ids. A ground-truth edge whose
/// endpoints are unmatched, or whose predicted edge is missing, is a miss.
pub fn recall_counts(
    pred: &SceneGraph,
    gt: &SceneGraph,
    correspondence: Option<&BTreeMap<NodeId, NodeId>>,
) -> Result<RecallCounts> {
    if pred.vocab != gt.vocab {
        return Err(Error::Validation(
            "predicted and ground-truth graphs use different vocabularies".into(),
        ));
    }
    let map = |id: NodeId| -> Option<NodeId> {
        match correspondence {
            Some(m) => m.get(&id).copied(),
            None => Some(id),
        }
    };
    let pred_nodes: BTreeMap<NodeId, &[f64]> = pred.nodes.iter().map(|n| (n.id, n.class_dist.probs())).collect();
    let pred_edges: BTreeMap<(NodeId, NodeId), &SceneGraphEdge> =
        pred.edges.iter().map(|e| ((e.src, e.dst), e)).collect();
    let gt_class: BTreeMap<NodeId, usize> = gt.nodes.iter().map(|n| (n.id, n.class_dist.argmax())).collect();

    let mut c = RecallCounts::default();
    for n in &gt.nodes {
        let truth = n.class_dist.argmax();
        let hit = map(n.id)
            .and_then(|p| pred_nodes.get(&p))
            .is_some_and(|probs| argmax(probs) == truth);
        bump(&mut c.obj, truth, hit);
    }
    for e in &gt.edges {
        let truth = e.predicate_dist.argmax();
        let matched = map(e.src).zip(map(e.dst)).and_then(|(s, d)| {
            let pe = pred_edges.get(&(s, d))?;
            Some((pred_nodes.get(&s)?, pe, pred_nodes.get(&d)?))
        });
        let (pred_hit, rel_hit) = match matched {
            Some((ps, pe, po)) => {
                let probs = pe.predicate_dist.probs();
                let (s, p, o) = top_triplet(ps, probs, po);
                (
                    argmax(probs) == truth,
                    s == gt_class[&e.src] && p == truth && o == gt_class[&e.dst],
                )
            }
            None => (false, false),
        };
        bump(&mut c.pred, truth, pred_hit);
        c.rel.0 += rel_hit as usize;
        c.rel.1 += 1;
    }
    Ok(c)
}

pub fn recall(
    pred: &SceneGraph,
    gt: &SceneGraph,
    correspondence: Option<&BTreeMap<NodeId, NodeId>>,
) -> Result<RecallReport> {
    Ok(recall_counts(pred, gt, correspondence)?.report(&gt.vocab.objects, &gt.vocab.predicates))
}

impl RecallReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "", "R@1 rel", "R@1 obj", "R@1 pred", "mR obj", "mR pred"
        );
        let _ = writeln!(
            s,
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            "recall", self.recall_rel, self.recall_obj, self.recall_pred, self.mrecall_obj, self.mrecall_pred
        );
        for (title, rows) in [("object", &self.per_class_obj), ("predicate", &self.per_class_pred)] {
            let _ = writeln!(s, "\n{:<14} {:>6} {:>6} {:>8}", title, "hits", "total", "recall");
            for r in rows {
                let _ = writeln!(s, "{:<14} {:>6} {:>6} {:>8.4}", r.class, r.hits, r.total, r.recall);
            }
        }
        s
    }
}
