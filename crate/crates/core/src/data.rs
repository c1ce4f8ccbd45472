//! Synthetic indoor scenes and the dataset JSONL format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"scene_id", "split", "entities": [{"id", "image_feat", "points", "obb", "gt_class"?}],
//!  "graph": <scene graph>, "shape_codes": [{"id", "entry", "code"}]}
//! ```
//!
//! Scenes are rooms with the floor at z = 0 and +y pointing to the front.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{neighbor_pairs, obb_overlap, Obb};
use crate::graph::{ClassDistribution, NodeId, SceneGraph, SceneGraphEdge, SceneGraphNode, Vocab};
use crate::io_util::{read_lines, write_atomic};
use crate::metrics::{annotate, eval_constraints, Placed, Relation};
use crate::shapes::ShapeCatalog;

/// Minimum number of surface points per entity.
pub const MIN_POINTS: usize = 8;
/// Points may lie this far outside their box.
pub const POINT_SLACK: f64 = 0.2;

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for p in parts {
        h = h.wrapping_add(*p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInput {
    pub id: NodeId,
    pub image_feat: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    pub obb: Obb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_class: Option<String>,
}

impl EntityInput {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < MIN_POINTS {
            return Err(Error::Validation(format!(
                "entity {} has {} points, need at least {MIN_POINTS}",
                self.id,
                self.points.len()
            )));
        }
        if let Some(p) = self.points.iter().find(|p| !self.obb.contains(**p, POINT_SLACK)) {
            return Err(Error::Validation(format!(
                "entity {} point {p:?} lies outside its box by more than {POINT_SLACK} m",
                self.id
            )));
        }
        if self.image_feat.iter().chain(self.points.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("entity {} has non-finite values", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCodeRecord {
    pub id: NodeId,
    pub entry: usize,
    pub code: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub split: Split,
    pub entities: Vec<EntityInput>,
    pub graph: SceneGraph,
    pub shape_codes: Vec<ShapeCodeRecord>,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let ids: BTreeSet<NodeId> = self.graph.nodes.iter().map(|n| n.id).collect();
        let ent: BTreeSet<NodeId> = self.entities.iter().map(|e| e.id).collect();
        let codes: BTreeSet<NodeId> = self.shape_codes.iter().map(|c| c.id).collect();
        if ids != ent || ids != codes {
            return Err(Error::Validation(format!(
                "scene {}: entities, graph nodes and shape codes list different ids",
                self.scene_id
            )));
        }
        for e in &self.entities {
            e.validate()?;
        }
        Ok(())
    }

    pub fn codes(&self) -> BTreeMap<NodeId, Vec<f64>> {
        self.shape_codes.iter().map(|c| (c.id, c.code.clone())).collect()
    }

    pub fn boxes(&self) -> BTreeMap<NodeId, Obb> {
        self.graph.nodes.iter().map(|n| (n.id, n.obb)).collect()
    }
}

/// Typical (min, max) dimensions (width, depth, height) per class.
fn class_dims(class: &str) -> [(f64, f64); 3] {
    match class {
        "table" => [(1.2, 1.8), (0.7, 1.0), (0.7, 0.8)],
        "chair" => [(0.45, 0.6), (0.45, 0.6), (0.8, 1.0)],
        "sofa" => [(1.6, 2.2), (0.8, 1.0), (0.75, 0.9)],
        "bed" => [(1.4, 1.8), (1.9, 2.2), (0.45, 0.6)],
        "cabinet" => [(0.8, 1.2), (0.4, 0.6), (0.8, 1.2)],
        "lamp" => [(0.3, 0.4), (0.3, 0.4), (1.4, 1.8)],
        "desk" => [(1.0, 1.4), (0.6, 0.8), (0.72, 0.78)],
        "shelf" => [(0.8, 1.2), (0.3, 0.4), (1.6, 2.0)],
        "tv_stand" => [(1.2, 1.8), (0.4, 0.5), (0.45, 0.6)],
        "nightstand" => [(0.4, 0.5), (0.4, 0.5), (0.5, 0.6)],
        "wardrobe" => [(1.0, 1.6), (0.55, 0.65), (1.9, 2.2)],
        "plant" => [(0.3, 0.5), (0.3, 0.5), (0.6, 1.4)],
        other => {
            let h = derive_seed(0, &other.bytes().map(u64::from).collect::<Vec<_>>());
            let base = 0.4 + (h % 100) as f64 / 100.0;
            [(base, base + 0.3), (base * 0.8, base * 0.8 + 0.3), (0.5, 1.5)]
        }
    }
}

/// Seeded per-class image prototypes, `[classes][dim]`.
pub fn class_prototypes(classes: &[String], dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x70_70]));
    classes
        .iter()
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Uniform samples on the box surface plus clipped Gaussian noise.
pub fn sample_surface_points(obb: &Obb, n: usize, noise: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let [w, d, h] = obb.dims();
    let areas = [d * h, d * h, w * h, w * h, w * d, w * d];
    let total: f64 = areas.iter().sum();
    let c = obb.centroid();
    let clip = (3.0 * noise).min(POINT_SLACK / 2.0);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 5;
            for (k, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = k;
                    break;
                }
                pick -= a;
            }
            let (u, v): (f64, f64) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let local = match face {
                0 => [-w / 2.0, u * d, v * h],
                1 => [w / 2.0, u * d, v * h],
                2 => [u * w, -d / 2.0, v * h],
                3 => [u * w, d / 2.0, v * h],
                4 => [u * w, v * d, -h / 2.0],
                _ => [u * w, v * d, h / 2.0],
            };
            let r = obb.rotate(local);
            let mut jitter = || {
                let x: f64 = normal.sample(rng);
                x.clamp(-clip, clip)
            };
            [r[0] + c[0] + jitter(), r[1] + c[1] + jitter(), r[2] + c[2] + jitter()]
        })
        .collect()
}

fn sample_dims(class: &str, rng: &mut impl Rng) -> [f64; 3] {
    class_dims(class).map(|(lo, hi)| rng.random_range(lo..=hi))
}

fn sample_yaw(rng: &mut impl Rng) -> f64 {
    rng.random_range(0..4) as f64 * FRAC_PI_2 + rng.random_range(-0.1..0.1)
}

/// Places class-typed boxes in a room without overlaps. `None` when some
/// object cannot be placed within `max_tries` attempts.
pub fn place_objects(cfg: &Config, count: usize, rng: &mut impl Rng) -> Result<Option<Vec<(usize, Obb)>>> {
    let mut placed: Vec<(usize, Obb)> = Vec::with_capacity(count);
    let fits = |o: &Obb, placed: &[(usize, Obb)]| {
        let e = o.world_extents();
        e[0].0 >= 0.0
            && e[0].1 <= cfg.room_x
            && e[1].0 >= 0.0
            && e[1].1 <= cfg.room_y
            && placed.iter().all(|(_, p)| !obb_overlap(o, p))
    };
    while placed.len() < count {
        let class = rng.random_range(0..cfg.classes.len());
        let dims = sample_dims(&cfg.classes[class], rng);
        let twin = placed.len() + 2 <= count && rng.random::<f64>() < cfg.mirror_prob;
        let mut done = false;
        for _ in 0..cfg.max_tries {
            let yaw = sample_yaw(rng);
            let x = rng.random_range(0.0..cfg.room_x);
            let y = rng.random_range(0.0..cfg.room_y);
            let a = Obb::new([x, y, dims[2] / 2.0], dims, yaw)?;
            if !fits(&a, &placed) {
                continue;
            }
            if twin {
                // Mirror image across the vertical plane x = x + gap/2.
                let gap = rng.random_range(0.6..2.5);
                let b = Obb::new([x + gap, y, dims[2] / 2.0], dims, PI - yaw)?;
                if obb_overlap(&a, &b) || !fits(&b, &placed) {
                    continue;
                }
                placed.push((class, a));
                placed.push((class, b));
            } else {
                placed.push((class, a));
            }
            done = true;
            break;
        }
        if !done {
            return Ok(None);
        }
    }
    Ok(Some(placed))
}

pub fn vocab(cfg: &Config) -> Result<Vocab> {
    Vocab::new(cfg.classes.clone(), Relation::names())
}

/// Ground-truth graph over the neighbor pairs of `objects` (id, class, box),
/// labelled with the most specific relation of each ordered pair.
pub fn ground_truth_graph(vocab: &Vocab, objects: &[(NodeId, usize, Obb)], cfg: &Config) -> Result<SceneGraph> {
    let th = cfg.thresholds();
    let boxes: Vec<Obb> = objects.iter().map(|o| o.2).collect();
    let pairs = neighbor_pairs(&boxes, cfg.margin)?;
    let placed: Vec<Placed<'_>> = objects
        .iter()
        .map(|(_, c, o)| Placed { obb: o, class: *c })
        .collect();
    let labels = annotate(&placed, Some(&pairs), crate::metrics::AnnotationMode::MostSpecific, &th);
    let np = vocab.predicates.len();
    let nodes = objects
        .iter()
        .map(|(id, c, o)| SceneGraphNode {
            id: *id,
            class_dist: ClassDistribution::one_hot(*c, vocab.objects.len()),
            obb: *o,
            feature: vec![],
            fusion_weight: 1.0,
        })
        .collect();
    let edges = labels
        .into_iter()
        .map(|(i, j, r)| {
            let p = vocab
                .predicate_index(r.name())
                .ok_or_else(|| Error::Config(format!("predicate {} missing from vocabulary", r.name())))?;
            Ok(SceneGraphEdge {
                src: objects[i].0,
                dst: objects[j].0,
                predicate_dist: ClassDistribution::one_hot(p, np),
                feature: vec![],
                fusion_weight: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    SceneGraph::new(vocab.clone(), nodes, edges)
}

/// Generates one scene; `None` when placement fails.
pub fn synth_scene(
    cfg: &Config,
    index: u64,
    catalog: &ShapeCatalog,
    prototypes: &[Vec<f64>],
    vocab: &Vocab,
) -> Result<Option<(Vec<EntityInput>, SceneGraph, Vec<ShapeCodeRecord>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, index]));
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let Some(placed) = place_objects(cfg, count, &mut rng)? else {
        return Ok(None);
    };
    let img_noise = Normal::new(0.0, cfg.image_noise.max(0.0)).expect("finite sigma");
    let code_noise = Normal::new(0.0, cfg.shape_noise.max(0.0)).expect("finite sigma");
    let mut entities = Vec::with_capacity(placed.len());
    let mut codes = Vec::with_capacity(placed.len());
    let mut objects = Vec::with_capacity(placed.len());
    for (k, (class, obb)) in placed.into_iter().enumerate() {
        let id = k as NodeId;
        let name = &cfg.classes[class];
        let options = catalog.class_entries(name);
        if options.is_empty() {
            return Err(Error::Config(format!("shape catalog has no entry for class {name}")));
        }
        let entry = options[rng.random_range(0..options.len())];
        let code = catalog.entries[entry]
            .code
            .iter()
            .map(|c| c + code_noise.sample(&mut rng))
            .collect();
        codes.push(ShapeCodeRecord { id, entry, code });
        entities.push(EntityInput {
            id,
            image_feat: prototypes[class].iter().map(|p| p + img_noise.sample(&mut rng)).collect(),
            points: sample_surface_points(&obb, cfg.points, cfg.point_noise, &mut rng),
            obb,
            gt_class: Some(name.clone()),
        });
        objects.push((id, class, obb));
    }
    let graph = ground_truth_graph(vocab, &objects, cfg)?;
    let report = eval_constraints(&graph, &graph_boxes(&graph), &cfg.thresholds())?;
    if report.relations.iter().any(|r| r.satisfied != r.total) {
        return Err(Error::Validation(format!("scene {index}: ground truth is not self-consistent")));
    }
    Ok(Some((entities, graph, codes)))
}

fn graph_boxes(g: &SceneGraph) -> BTreeMap<NodeId, Obb> {
    g.nodes.iter().map(|n| (n.id, n.obb)).collect()
}

/// Generates `cfg.scenes` scenes, retrying with fresh scene seeds (up to four
/// times the requested count) when placement fails.
pub fn synth_dataset(cfg: &Config) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let vocab = vocab(cfg)?;
    let catalog = ShapeCatalog::procedural(&cfg.classes, cfg.seed);
    let prototypes = class_prototypes(&cfg.classes, cfg.image_dim, cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut index = 0u64;
    while scenes.len() < cfg.scenes {
        if index >= 4 * cfg.scenes as u64 {
            return Err(Error::Validation(format!(
                "only {} of {} scenes could be placed; enlarge the room or lower the object count",
                scenes.len(),
                cfg.scenes
            )));
        }
        match synth_scene(cfg, index, &catalog, &prototypes, &vocab)? {
            Some(s) => scenes.push(s),
            None => log::warn!("scene {index}: placement failed after {} tries, skipped", cfg.max_tries),
        }
        index += 1;
    }
    let splits = assign_splits(scenes.len(), cfg.train_fraction, cfg.seed);
    Ok(scenes
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, ((entities, graph, shape_codes), split))| SceneRecord {
            scene_id: format!("scene_{i:04}"),
            split,
            entities,
            graph,
            shape_codes,
        })
        .collect())
}

/// Seeded split: a shuffled prefix of `round(n · train_fraction)` scenes is
/// the training set.
pub fn assign_splits(n: usize, train_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2])));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut out = vec![Split::Val; n];
    for &i in &order[..n_train.min(n)] {
        out[i] = Split::Train;
    }
    out
}

pub fn to_jsonl(records: &[SceneRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, records: &[SceneRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Reads and validates every line; errors carry the 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let mut out: Vec<SceneRecord> = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec: SceneRecord = serde_json::from_str(&text).map_err(|e| Error::Dataset {
            line,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Dataset {
            line,
            msg: e.to_string(),
        })?;
        if let Some(first) = out.first() {
            if first.graph.vocab != rec.graph.vocab {
                return Err(Error::Dataset {
                    line,
                    msg: "vocabulary differs from the first record".into(),
                });
            }
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("dataset {} is empty", path.display())));
    }
    Ok(out)
}

/// One timestep of observations: a subset of a scene's entities with fresh
/// feature and point noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: usize,
    pub entities: Vec<EntityInput>,
}

/// `steps` partial views of a scene. Each entity is seen with probability
/// `visibility`; every entity is seen at least once over the sequence.
pub fn observation_sequence(
    record: &SceneRecord,
    steps: usize,
    visibility: f64,
    cfg: &Config,
    seed: u64,
) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let noise = Normal::new(0.0, cfg.image_noise.max(0.0) * 0.5).expect("finite sigma");
    let steps = steps.max(1);
    let mut seen = vec![false; record.entities.len()];
    (0..steps)
        .map(|t| {
            let mut entities = Vec::new();
            for (k, e) in record.entities.iter().enumerate() {
                let last_chance = t + 1 == steps && !seen[k];
                if !(last_chance || rng.random::<f64>() < visibility) {
                    continue;
                }
                seen[k] = true;
                let mut e = e.clone();
                e.image_feat.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                e.points = sample_surface_points(&e.obb, e.points.len(), cfg.point_noise, &mut rng);
                entities.push(e);
            }
            Observation { t, entities }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::default();
        c.scenes = 6;
        c
    }

    #[test]
    fn deterministic_bytes() {
        let a = to_jsonl(&synth_dataset(&small()).unwrap()).unwrap();
        let b = to_jsonl(&synth_dataset(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_points_and_splits() {
        let cfg = small();
        let ds = synth_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 6);
        for r in &ds {
            r.validate().unwrap();
            assert!((cfg.min_objects..=cfg.max_objects).contains(&r.entities.len()));
        }
        let train = ds.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 5);
    }

    #[test]
    fn far_point_rejected() {
        let ds = synth_dataset(&small()).unwrap();
        let mut e = ds[0].entities[0].clone();
        e.points[0][0] += 5.0;
        assert!(e.validate().is_err());
        e.points.truncate(3);
        assert!(e.validate().is_err());
    }

    #[test]
    fn observations_cover_every_entity() {
        let cfg = small();
        let ds = synth_dataset(&cfg).unwrap();
        let obs = observation_sequence(&ds[0], 4, 0.5, &cfg, 1);
        let seen: BTreeSet<NodeId> = obs.iter().flat_map(|o| o.entities.iter().map(|e| e.id)).collect();
        assert_eq!(seen.len(), ds[0].entities.len());
        for o in &obs {
            for e in &o.entities {
                e.validate().unwrap();
            }
        }
    }
}
