use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sgforge::autodiff::Checkpoint;
use sgforge::config::Config;
use sgforge::data::{observation_sequence, read_dataset, synth_dataset, write_dataset, Observation, SceneRecord, Split};
use sgforge::io_util::{read_jsonl, write_atomic, write_json_pretty};
use sgforge::metrics::eval_constraints_many;
use sgforge::pipeline::{
    export_scene_files, fuse_frames, predict_frames, run_pipeline, write_outputs, LocalGraph, GRAPH_FILE, LAYOUT_FILE,
    SCENE_FILE,
};
use sgforge::sgp::SgpModel;
use sgforge::shapes::{assemble, Layout, ShapeCatalog};
use sgforge::train::{evaluate_gen, evaluate_sgp, new_gen, new_sgp, train_gen, train_sgp, TrainOptions};
use sgforge::vae::{GenModel, GenerateMode};
use sgforge::{Error, Obb, Result, SceneGraph};

#[derive(Parser, Debug)]
#[command(name = "sgforge", version, about = "Scene-graph prediction, fusion and layout generation")]
struct Cli {
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Reconstruct,
    Sample,
}

impl From<ModeArg> for GenerateMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Reconstruct => GenerateMode::Reconstruct,
            ModeArg::Sample => GenerateMode::Sample,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration.
    Config {
        /// Print every key with its value (the default).
        #[arg(long)]
        dump: bool,
    },
    /// Write a synthetic dataset, its shape catalog and per-scene observation sequences.
    Synth {
        /// Timesteps per observation sequence.
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// Chance that an entity is visible at a timestep.
        #[arg(long, default_value_t = 0.7)]
        visibility: f64,
    },
    /// Train the scene-graph predictor.
    TrainSgp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the layout generator.
    TrainGen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict one scene graph per timestep of an observation sequence.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// JSONL of `{t, entities}` lines.
        #[arg(long)]
        input: PathBuf,
    },
    /// Fuse per-timestep graphs into one global graph.
    Fuse {
        /// JSONL of `{t, graph, correspondences?}` lines.
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a layout with shape codes from a scene graph.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
        mode: ModeArg,
        /// JSON object mapping node ids to shape codes; class priors fill the rest.
        #[arg(long)]
        codes: Option<PathBuf>,
    },
    /// Assemble a layout into meshes and write OBJ plus JSON sidecar.
    Export {
        #[arg(long)]
        layout: PathBuf,
        /// Catalog JSON; defaults to the procedural catalog for the configured classes and seed.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Top-1 recall of a predictor on a dataset.
    EvalSgp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Constraint accuracy of a layout against a graph, or of reconstructions over a dataset.
    EvalConstraints {
        #[arg(long, requires = "layout", conflicts_with_all = ["model", "data"])]
        graph: Option<PathBuf>,
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Run predict, fuse, generate and export in one go.
    Pipeline {
        #[arg(long)]
        sgp: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
        mode: ModeArg,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn select(records: &[SceneRecord], split: SplitArg) -> Vec<&SceneRecord> {
    records
        .iter()
        .filter(|r| match split {
            SplitArg::All => true,
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Val => r.split == Split::Val,
        })
        .collect()
}

fn load_sgp(path: &Path) -> Result<SgpModel> {
    SgpModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_gen(path: &Path) -> Result<GenModel> {
    GenModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn read_codes(path: &Path) -> Result<BTreeMap<u64, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn catalog(cfg: &Config, path: Option<&Path>) -> Result<ShapeCatalog> {
    let c = match path {
        Some(p) => ShapeCatalog::read(p)?,
        None => ShapeCatalog::procedural(&cfg.classes, cfg.seed),
    };
    Ok(c)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Config { .. } => print!("{}", cfg.dump()),
        Command::Synth { steps, visibility } => {
            if !(0.0..=1.0).contains(visibility) {
                return Err(Error::Validation(format!("visibility {visibility} is not a probability")));
            }
            let records = synth_dataset(&cfg)?;
            write_dataset(&out.join("dataset.jsonl"), &records)?;
            write_json_pretty(&out.join("catalog.json"), &ShapeCatalog::procedural(&cfg.classes, cfg.seed))?;
            let obs_dir = out.join("observations");
            for (k, r) in records.iter().enumerate() {
                let seq = observation_sequence(r, *steps, *visibility, &cfg, cfg.seed.wrapping_add(k as u64));
                let mut text = String::new();
                for o in &seq {
                    text.push_str(&serde_json::to_string(o)?);
                    text.push('\n');
                }
                write_atomic(&obs_dir.join(format!("{}.jsonl", r.scene_id)), text.as_bytes())?;
            }
            println!("wrote {} scenes to {}", records.len(), out.display());
        }
        Command::TrainSgp { data, resume } => {
            let records = read_dataset(data)?;
            let mut model = new_sgp(&cfg, &records)?;
            let mut opts = TrainOptions::sgp(&cfg);
            opts.out_dir = Some(out.clone());
            opts.resume = resume.clone();
            let s = train_sgp(&mut model, &records, &opts)?;
            let train = select(&records, SplitArg::Train);
            println!("{} epochs, {} steps, best loss {:.5}", s.history.len(), s.steps, s.best_loss);
            print!("{}", evaluate_sgp(&model, &train)?.to_table());
        }
        Command::TrainGen { data, resume } => {
            let records = read_dataset(data)?;
            let mut model = new_gen(&cfg, &records)?;
            let mut opts = TrainOptions::gen(&cfg);
            opts.out_dir = Some(out.clone());
            opts.resume = resume.clone();
            let s = train_gen(&mut model, &records, &opts)?;
            println!("{} epochs, {} steps, best loss {:.5}", s.history.len(), s.steps, s.best_loss);
            print!("{}", evaluate_gen(&model, &select(&records, SplitArg::Train), &cfg.thresholds())?.to_table());
        }
        Command::Predict { model, input } => {
            let model = load_sgp(model)?;
            let frames: Vec<Observation> = read_jsonl(input)?;
            let locals = predict_frames(&model, &frames)?;
            let path = out.join("local_graphs.jsonl");
            let mut text = String::new();
            for l in &locals {
                text.push_str(&serde_json::to_string(l)?);
                text.push('\n');
            }
            write_atomic(&path, text.as_bytes())?;
            println!("wrote {} graphs to {}", locals.len(), path.display());
        }
        Command::Fuse { input } => {
            let locals: Vec<LocalGraph> = read_jsonl(input)?;
            let first = locals
                .first()
                .ok_or_else(|| Error::Validation(format!("{} has no graphs", input.display())))?;
            let global = fuse_frames(&first.graph.vocab, &locals)?;
            let mut text = global.to_json_pretty()?;
            text.push('\n');
            write_atomic(&out.join(GRAPH_FILE), text.as_bytes())?;
            println!("fused {} graphs into {} nodes and {} edges", locals.len(), global.nodes.len(), global.edges.len());
        }
        Command::Generate { model, graph, mode, codes } => {
            let model = load_gen(model)?;
            let graph = SceneGraph::read(graph)?;
            let codes: Option<BTreeMap<u64, Vec<f64>>> = codes.as_deref().map(read_codes).transpose()?;
            let layout = model.generate(&graph, codes.as_ref(), (*mode).into(), cfg.seed)?;
            write_json_pretty(&out.join(LAYOUT_FILE), &layout)?;
            println!("generated {} boxes", layout.nodes.len());
        }
        Command::Export { layout, catalog: cat } => {
            let layout = Layout::read(layout)?;
            let scene = assemble(&layout, &catalog(&cfg, cat.as_deref())?)?;
            export_scene_files(&out.join(SCENE_FILE), &scene)?;
            println!("exported {} objects to {}", scene.objects.len(), out.join(SCENE_FILE).display());
        }
        Command::EvalSgp { model, data, split } => {
            let model = load_sgp(model)?;
            let records = read_dataset(data)?;
            let chosen = select(&records, *split);
            if chosen.is_empty() {
                return Err(Error::Validation("the selected split is empty".into()));
            }
            let report = evaluate_sgp(&model, &chosen)?;
            write_json_pretty(&out.join("recall.json"), &report)?;
            print!("{}", report.to_table());
        }
        Command::EvalConstraints { graph, layout, model, data, split } => {
            let th = cfg.thresholds();
            let report = match (graph, layout, model, data) {
                (Some(g), Some(l), _, _) => {
                    let graph = SceneGraph::read(g)?;
                    let boxes: BTreeMap<u64, Obb> =
                        Layout::read(l)?.nodes.into_iter().map(|n| (n.id, n.obb)).collect();
                    eval_constraints_many([(&graph, &boxes)], &th)?
                }
                (_, _, Some(m), Some(d)) => {
                    let model = load_gen(m)?;
                    let records = read_dataset(d)?;
                    evaluate_gen(&model, &select(&records, *split), &th)?
                }
                _ => {
                    return Err(Error::Validation(
                        "pass either --graph with --layout, or --model with --data".into(),
                    ))
                }
            };
            write_json_pretty(&out.join("constraints.json"), &report)?;
            write_atomic(&out.join("constraints.csv"), report.to_csv().as_bytes())?;
            print!("{}", report.to_table());
        }
        Command::Pipeline { sgp, gen, input, mode, catalog: cat } => {
            let sgp = load_sgp(sgp)?;
            let gen = load_gen(gen)?;
            let frames: Vec<Observation> = read_jsonl(input)?;
            let result = run_pipeline(&sgp, &gen, &catalog(&cfg, cat.as_deref())?, &frames, (*mode).into(), cfg.seed)?;
            write_outputs(out, &result)?;
            let t = result.times;
            println!(
                "predict {:.3}s, fuse {:.3}s, generate {:.3}s, export {:.3}s",
                t.predict, t.fuse, t.generate, t.export
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
