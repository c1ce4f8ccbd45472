//! Round trips of every file format and golden-file byte comparisons.

use std::fs;
use std::path::{Path, PathBuf};

use sgforge::autodiff::Checkpoint;
use sgforge::data::{read_dataset, synth_dataset, to_jsonl, write_dataset, SceneRecord};
use sgforge::shapes::{assemble, export_scene, scene_from_export, sidecar_path, to_obj, to_sidecar, Layout, Scene, ShapeCatalog, Sidecar};
use sgforge::sgp::SgpModel;
use sgforge::train::{new_gen, new_sgp};
use sgforge::vae::{GenModel, GenerateMode};
use sgforge::SceneGraph;

use super::tiny_config;

/// Everything the checks need, built from the tiny config with two scenes.
pub struct Fixture {
    pub records: Vec<SceneRecord>,
    pub sgp: SgpModel,
    pub gen: GenModel,
    pub graph: SceneGraph,
    pub layout: Layout,
    pub scene: Scene,
}

pub fn fixture() -> sgforge::Result<Fixture> {
    let mut cfg = tiny_config();
    cfg.scenes = 2;
    let records = synth_dataset(&cfg)?;
    let sgp = new_sgp(&cfg, &records)?;
    let gen = new_gen(&cfg, &records)?;
    let graph = sgp.predict(&records[0].entities)?;
    let layout = gen.generate(&graph, None, GenerateMode::Sample, 5)?;
    let scene = assemble(&layout, &ShapeCatalog::procedural(&cfg.classes, cfg.seed))?;
    Ok(Fixture {
        records,
        sgp,
        gen,
        graph,
        layout,
        scene,
    })
}

fn ensure(ok: bool, what: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn graph_round_trip(f: &Fixture) -> Result<(), String> {
    let text = f.graph.to_json().map_err(e)?;
    ensure(SceneGraph::from_json(&text).map_err(e)? == f.graph, "compact graph JSON")?;
    let pretty = f.graph.to_json_pretty().map_err(e)?;
    ensure(SceneGraph::from_json(&pretty).map_err(e)? == f.graph, "pretty graph JSON")?;
    let layout = serde_json::to_string(&f.layout).map_err(e)?;
    ensure(serde_json::from_str::<Layout>(&layout).map_err(e)? == f.layout, "layout JSON")
}

pub fn dataset_round_trip(f: &Fixture, dir: &Path) -> Result<(), String> {
    let path = dir.join("dataset.jsonl");
    write_dataset(&path, &f.records).map_err(e)?;
    let back = read_dataset(&path).map_err(e)?;
    ensure(back == f.records, "dataset records")?;
    ensure(to_jsonl(&back).map_err(e)?.as_bytes() == fs::read(&path).map_err(e)?, "dataset bytes")
}

pub fn checkpoint_round_trip(f: &Fixture, dir: &Path) -> Result<(), String> {
    for (name, ck) in [("sgp", f.sgp.to_checkpoint()), ("gen", f.gen.to_checkpoint())] {
        let path = dir.join(format!("{name}.ckpt"));
        ck.save(&path).map_err(e)?;
        let back = Checkpoint::load(&path).map_err(e)?;
        ensure(back == ck, "checkpoint contents")?;
        for (k, t) in &ck.tensors {
            let bits = |t: &sgforge::autodiff::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(bits(t) == bits(&back.tensors[k]), "checkpoint tensor bits")?;
        }
    }
    let sgp = SgpModel::from_checkpoint(&Checkpoint::load(&dir.join("sgp.ckpt")).map_err(e)?).map_err(e)?;
    ensure(sgp.predict(&f.records[0].entities).map_err(e)? == f.graph, "restored predictor output")?;
    let gen = GenModel::from_checkpoint(&Checkpoint::load(&dir.join("gen.ckpt")).map_err(e)?).map_err(e)?;
    let layout = gen.generate(&f.graph, None, GenerateMode::Sample, 5).map_err(e)?;
    ensure(layout == f.layout, "restored generator output")
}

pub fn obj_round_trip(f: &Fixture, dir: &Path) -> Result<(), String> {
    let path = dir.join("scene.obj");
    export_scene(&f.scene, &path).map_err(e)?;
    let obj = fs::read_to_string(&path).map_err(e)?;
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).map_err(e)?).map_err(e)?;
    ensure(scene_from_export(&obj, &side).map_err(e)? == f.scene, "OBJ and sidecar")
}

/// Byte content of each golden file under a fixed seed.
pub fn golden_outputs(f: &Fixture) -> sgforge::Result<Vec<(&'static str, Vec<u8>)>> {
    let mut graph = f.graph.to_json_pretty()?;
    graph.push('\n');
    let mut layout = serde_json::to_string_pretty(&f.layout)?;
    layout.push('\n');
    let mut side = serde_json::to_string_pretty(&to_sidecar(&f.scene))?;
    side.push('\n');
    Ok(vec![
        ("dataset.jsonl", to_jsonl(&f.records)?.into_bytes()),
        ("graph.json", graph.into_bytes()),
        ("layout.json", layout.into_bytes()),
        ("scene.obj", to_obj(&f.scene).into_bytes()),
        ("scene.json", side.into_bytes()),
        ("sgp.ckpt", f.sgp.to_checkpoint().to_bytes()?),
    ])
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares against the stored golden files; with `SGFORGE_BLESS=1` rewrites
/// them instead.
pub fn golden_check(f: &Fixture) -> Result<(), String> {
    let dir = golden_dir();
    let bless = std::env::var("SGFORGE_BLESS").is_ok_and(|v| v == "1");
    for (name, bytes) in golden_outputs(f).map_err(e)? {
        let path = dir.join(name);
        if bless {
            fs::create_dir_all(&dir).map_err(e)?;
            fs::write(&path, &bytes).map_err(e)?;
            continue;
        }
        let stored = fs::read(&path).map_err(|err| format!("{}: {err}", path.display()))?;
        ensure(stored == bytes, &format!("{name} differs from the golden file"))?;
    }
    Ok(())
}
