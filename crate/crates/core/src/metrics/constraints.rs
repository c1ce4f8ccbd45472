//! Checks generated boxes against the predicates of an input scene graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::relations::{holds, Placed, Relation, RelationThresholds};
use crate::error::{Error, Result};
use crate::geometry::Obb;
use crate::graph::{NodeId, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationAccuracy {
    pub relation: Relation,
    pub satisfied: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Per-relation accuracy. `total`, `easy` and `hard` are unweighted means
/// over the relations that occur at least once (0 when none occur).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub relations: Vec<RelationAccuracy>,
    pub total: f64,
    pub easy: f64,
    pub hard: f64,
}

/// Satisfied / total counts per relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub counts: BTreeMap<Relation, (usize, usize)>,
}

impl ConstraintCounts {
    pub fn record(&mut self, rel: Relation, ok: bool) {
        let c = self.counts.entry(rel).or_insert((0, 0));
        c.0 += ok as usize;
        c.1 += 1;
    }

    pub fn merge(&mut self, other: &ConstraintCounts) {
        for (r, (s, t)) in &other.counts {
            let c = self.counts.entry(*r).or_insert((0, 0));
            c.0 += s;
            c.1 += t;
        }
    }

    pub fn report(&self) -> ConstraintReport {
        let relations: Vec<RelationAccuracy> = Relation::ALL
            .iter()
            .filter_map(|r| {
                self.counts.get(r).map(|&(s, t)| RelationAccuracy {
                    relation: *r,
                    satisfied: s,
                    total: t,
                    accuracy: s as f64 / t as f64,
                })
            })
            .collect();
        let mean = |f: &dyn Fn(&RelationAccuracy) -> bool| {
            let v: Vec<f64> = relations.iter().filter(|r| f(r)).map(|r| r.accuracy).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        ConstraintReport {
            total: mean(&|_| true),
            easy: mean(&|r| r.relation.is_easy()),
            hard: mean(&|r| !r.relation.is_easy()),
            relations,
        }
    }
}

impl ConstraintReport {
    pub fn accuracy(&self, rel: Relation) -> Option<f64> {
        self.relations.iter().find(|r| r.relation == rel).map(|r| r.accuracy)
    }

    /// Aligned text table: one row per relation, then the summary rows.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>9} {:>7} {:>9}\n", "relation", "satisfied", "total", "accuracy");
        for r in &self.relations {
            let _ = writeln!(s, "{:<12} {:>9} {:>7} {:>9.4}", r.relation.name(), r.satisfied, r.total, r.accuracy);
        }
        for (name, v) in [("easy", self.easy), ("hard", self.hard), ("total", self.total)] {
            let _ = writeln!(s, "{:<12} {:>9} {:>7} {:>9.4}", name, "", "", v);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("relation,satisfied,total,accuracy\n");
        for r in &self.relations {
            let _ = writeln!(s, "{},{},{},{}", r.relation.name(), r.satisfied, r.total, r.accuracy);
        }
        s
    }
}

/// Counts, for every edge of `graph`, whether its top-1 predicate holds on
/// the boxes in `boxes` (keyed by node id). Node classes are the graph's
/// top-1 classes.
pub fn count_constraints(
    graph: &SceneGraph,
    boxes: &BTreeMap<NodeId, Obb>,
    th: &RelationThresholds,
) -> Result<ConstraintCounts> {
    let relations: Vec<Relation> = graph
        .vocab
        .predicates
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_>>()?;
    let class: BTreeMap<NodeId, usize> = graph.nodes.iter().map(|n| (n.id, n.class_dist.argmax())).collect();
    let mut counts = ConstraintCounts::default();
    for e in &graph.edges {
        let rel = relations[e.predicate_dist.argmax()];
        let get = |id: NodeId| {
            boxes
                .get(&id)
                .ok_or_else(|| Error::Validation(format!("no generated box for node {id}")))
        };
        let (a, b) = (get(e.src)?, get(e.dst)?);
        let ok = holds(
            rel,
            Placed {
                obb: a,
                class: class[&e.src],
            },
            Placed {
                obb: b,
                class: class[&e.dst],
            },
            th,
        );
        counts.record(rel, ok);
    }
    Ok(counts)
}

pub fn eval_constraints(
    graph: &SceneGraph,
    boxes: &BTreeMap<NodeId, Obb>,
    th: &RelationThresholds,
) -> Result<ConstraintReport> {
    Ok(count_constraints(graph, boxes, th)?.report())
}

/// Pools edge counts over several scenes before averaging.
pub fn eval_constraints_many<'a>(
    scenes: impl IntoIterator<Item = (&'a SceneGraph, &'a BTreeMap<NodeId, Obb>)>,
    th: &RelationThresholds,
) -> Result<ConstraintReport> {
    let mut counts = ConstraintCounts::default();
    for (g, b) in scenes {
        counts.merge(&count_constraints(g, b, th)?);
    }
    Ok(counts.report())
}
