//! `predict → fuse → generate → export` over a sequence of observations.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::fusion::{Correspondences, FusionState};
use crate::graph::{SceneGraph, Vocab};
use crate::io_util::{write_atomic, write_json_pretty};
use crate::sgp::SgpModel;
use crate::shapes::{assemble, sidecar_path, to_obj, to_sidecar, Layout, Scene, ShapeCatalog};
use crate::vae::{GenModel, GenerateMode};

pub const GRAPH_FILE: &str = "graph.json";
pub const LAYOUT_FILE: &str = "layout.json";
pub const SCENE_FILE: &str = "scene.obj";
pub const TIMING_FILE: &str = "timing.json";

/// Predicted graph of one timestep; optional correspondences map its node
/// ids onto the global graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGraph {
    pub t: usize,
    pub graph: SceneGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<Correspondences>,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub predict: f64,
    pub fuse: f64,
    pub generate: f64,
    pub export: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub local: Vec<LocalGraph>,
    pub global: SceneGraph,
    pub layout: Layout,
    pub scene: Scene,
    pub times: StageTimes,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

pub fn predict_frames(model: &SgpModel, frames: &[Observation]) -> Result<Vec<LocalGraph>> {
    frames
        .iter()
        .map(|f| {
            Ok(LocalGraph {
                t: f.t,
                graph: model.predict(&f.entities)?,
                correspondences: None,
            })
        })
        .collect()
}

/// Fuses the local graphs in order of appearance.
pub fn fuse_frames(vocab: &Vocab, locals: &[LocalGraph]) -> Result<SceneGraph> {
    let mut state = FusionState::new(vocab.clone());
    for l in locals {
        state.fuse(&l.graph, l.correspondences.as_ref())?;
    }
    Ok(state.global)
}

/// Runs every stage in memory. Nothing is written; see [`write_outputs`].
pub fn run_pipeline(
    sgp: &SgpModel,
    gen: &GenModel,
    catalog: &ShapeCatalog,
    frames: &[Observation],
    mode: GenerateMode,
    seed: u64,
) -> Result<PipelineOutput> {
    if frames.is_empty() {
        return Err(Error::Validation("no observations to process".into()));
    }
    let t = Instant::now();
    let local = stage("predict", predict_frames(sgp, frames))?;
    let predict = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let global = stage("fuse", fuse_frames(&sgp.vocab, &local))?;
    let fuse = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let layout = stage("generate", gen.generate(&global, None, mode, seed))?;
    let generate = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let scene = stage("export", assemble(&layout, catalog))?;
    let export = t.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        local,
        global,
        layout,
        scene,
        times: StageTimes {
            predict,
            fuse,
            generate,
            export,
        },
    })
}

/// Writes the global graph, layout, OBJ with sidecar and stage timings into
/// `dir`. The OBJ goes last so a failure never leaves it half written.
pub fn write_outputs(dir: &Path, out: &PipelineOutput) -> Result<()> {
    let mut graph = out.global.to_json_pretty()?;
    graph.push('\n');
    write_atomic(&dir.join(GRAPH_FILE), graph.as_bytes())?;
    write_json_pretty(&dir.join(LAYOUT_FILE), &out.layout)?;
    write_json_pretty(&dir.join(TIMING_FILE), &out.times)?;
    export_scene_files(&dir.join(SCENE_FILE), &out.scene)
}

/// Sidecar first, then the OBJ, both atomically.
pub fn export_scene_files(obj_path: &Path, scene: &Scene) -> Result<()> {
    write_json_pretty(&sidecar_path(obj_path), &to_sidecar(scene))?;
    write_atomic(obj_path, to_obj(scene).as_bytes())
}

/// Shape codes by node id, as stored in a layout.
pub fn layout_codes(layout: &Layout) -> BTreeMap<u64, Vec<f64>> {
    layout.nodes.iter().map(|n| (n.id, n.shape_code.clone())).collect()
}
