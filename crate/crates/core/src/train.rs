//! Mini-batch training for both models.
//!
//! One optimizer step per batch of whole scenes, gradients averaged over the
//! batch. Every epoch appends a JSON line to the metrics log and rewrites
//! `last.ckpt` (parameters, optimizer moments, progress); `best.ckpt` keeps
//! the lowest validation loss, or training loss without a validation split.
//! Shuffling and sampling noise derive from `(seed, epoch)`, so a resumed run
//! continues exactly as an uninterrupted one would.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Checkpoint, GradAccumulator, LrSchedule, ParamStore, Tape, Var};
use crate::config::Config;
use crate::data::{derive_seed, SceneRecord, Split};
use crate::error::{Error, Result};
use crate::io_util::append_jsonl;
use crate::metrics::{
    eval_constraints_many, recall_counts, ConstraintReport, RecallCounts, RecallReport, RelationThresholds,
};
use crate::graph::Vocab;
use crate::sgp::{predict_graph, targets_from_graph, SgpConfig, SgpInput, SgpModel};
use crate::vae::{class_priors, BoxStats, ExtendedGraph, GenConfig, GenModel, GenerateMode};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Recall is logged every this many epochs and after the last one; 0
    /// disables it. Predictor only.
    pub eval_every: usize,
    /// Scales `adam.lr` per epoch over a horizon of `epochs`; resuming with
    /// a larger `epochs` stretches the remaining schedule.
    pub schedule: LrSchedule,
    /// Seconds; non-positive means unlimited. Checked after every step.
    pub time_budget: f64,
    pub seed: u64,
    /// Directory for checkpoints and the metrics log.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint (normally `last.ckpt`).
    pub resume: Option<PathBuf>,
}

impl TrainOptions {
    pub fn sgp(cfg: &Config) -> Self {
        TrainOptions {
            epochs: cfg.sgp_epochs,
            batch: cfg.sgp_batch,
            adam: AdamConfig {
                lr: cfg.sgp_lr,
                clip_norm: cfg.sgp_clip,
                ..AdamConfig::default()
            },
            eval_every: cfg.sgp_eval_every,
            schedule: cfg.sgp_lr_schedule,
            time_budget: cfg.sgp_time_budget,
            seed: cfg.seed,
            out_dir: None,
            resume: None,
        }
    }

    pub fn gen(cfg: &Config) -> Self {
        TrainOptions {
            epochs: cfg.gen_epochs,
            batch: cfg.gen_batch,
            adam: AdamConfig {
                lr: cfg.gen_lr,
                clip_norm: cfg.gen_clip,
                ..AdamConfig::default()
            },
            eval_every: 0,
            schedule: cfg.gen_lr_schedule,
            time_budget: cfg.gen_time_budget,
            seed: derive_seed(cfg.seed, &[0x6e6e]),
            out_dir: None,
            resume: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    /// Mean reconstruction term over training scenes (generator only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    /// Mean KL term over training scenes (generator only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    /// Smallest KL value seen in the epoch (generator only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_recall: Option<RecallSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_recall: Option<RecallSummary>,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

/// Headline numbers of a [`RecallReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub recall_rel: f64,
    pub recall_obj: f64,
    pub recall_pred: f64,
    pub mrecall_obj: f64,
    pub mrecall_pred: f64,
}

impl From<&RecallReport> for RecallSummary {
    fn from(r: &RecallReport) -> Self {
        RecallSummary {
            recall_rel: r.recall_rel,
            recall_obj: r.recall_obj,
            recall_pred: r.recall_pred,
            mrecall_obj: r.mrecall_obj,
            mrecall_pred: r.mrecall_pred,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochLog>,
    pub steps: u64,
    pub best_loss: f64,
    pub stopped_by_budget: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Progress {
    epoch: usize,
    steps: u64,
    best_loss: f64,
}

/// Loss of one scene: the objective and, for the generator, its
/// reconstruction and KL terms.
pub struct SceneLoss {
    pub loss: Var,
    pub parts: Option<(Var, Var)>,
}

fn run<F, H>(
    store: &mut ParamStore,
    meta: serde_json::Value,
    n_train: usize,
    n_val: usize,
    opts: &TrainOptions,
    mut scene_loss: F,
    mut on_epoch: H,
) -> Result<TrainSummary>
where
    F: FnMut(&ParamStore, &mut Tape, Split, usize, &mut ChaCha8Rng) -> Result<SceneLoss>,
    H: FnMut(&ParamStore, &mut EpochLog) -> Result<()>,
{
    if n_train == 0 {
        return Err(Error::Validation("training split is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut adam = Adam::new(opts.adam, store);
    let mut start_epoch = 0;
    let mut best = f64::INFINITY;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        let p: Progress = serde_json::from_value(ck.meta["progress"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: no training progress: {e}", path.display())))?;
        store.load_named(&ck.tensors)?;
        adam = Adam::restore(opts.adam, store, &ck.tensors, p.steps)?;
        start_epoch = p.epoch + 1;
        best = p.best_loss;
    }
    let log_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_LOG));
    let started = Instant::now();
    let over_budget = |t: &Instant| opts.time_budget > 0.0 && t.elapsed().as_secs_f64() >= opts.time_budget;
    let mut history = Vec::new();
    let mut stopped = false;
    for epoch in start_epoch..opts.epochs {
        adam.config.lr = opts.adam.lr * opts.schedule.factor(epoch, opts.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[epoch as u64]));
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm) = (0.0, 0.0);
        let (mut recon_sum, mut kl_sum, mut kl_min) = (0.0, 0.0, None::<f64>);
        let mut seen = 0usize;
        for batch in order.chunks(opts.batch) {
            let mut acc = GradAccumulator::new(store);
            for &k in batch {
                let mut tape = Tape::new();
                let out = scene_loss(store, &mut tape, Split::Train, k, &mut rng)?;
                let value = tape.value(out.loss).item();
                if !value.is_finite() {
                    return Err(Error::Validation(format!("non-finite loss at epoch {epoch}, scene {k}")));
                }
                if let Some((recon, kl)) = out.parts {
                    let kl = tape.value(kl).item();
                    if kl < -1e-9 {
                        return Err(Error::Validation(format!("negative KL {kl} at epoch {epoch}")));
                    }
                    kl_min = Some(kl_min.map_or(kl, |m| m.min(kl)));
                    kl_sum += kl;
                    recon_sum += tape.value(recon).item();
                }
                loss_sum += value;
                seen += 1;
                acc.add(&tape.backward(out.loss)?, &tape);
            }
            norm = adam.step(store, &acc.mean(store));
            if over_budget(&started) {
                stopped = true;
                break;
            }
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = if n_val > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[u64::MAX]));
            let mut s = 0.0;
            for k in 0..n_val {
                let mut tape = Tape::new();
                let out = scene_loss(store, &mut tape, Split::Val, k, &mut rng)?;
                s += tape.value(out.loss).item();
            }
            Some(s / n_val as f64)
        } else {
            None
        };
        let mut log = EpochLog {
            epoch,
            steps: adam.steps_taken(),
            train_loss,
            val_loss,
            recon: kl_min.map(|_| recon_sum / seen as f64),
            kl: kl_min.map(|_| kl_sum / seen as f64),
            kl_min,
            train_recall: None,
            val_recall: None,
            grad_norm: norm,
            elapsed_s: 0.0,
        };
        on_epoch(store, &mut log)?;
        log.elapsed_s = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: train {train_loss:.5}{}",
            val_loss.map(|v| format!(", val {v:.5}")).unwrap_or_default()
        );
        let score = val_loss.unwrap_or(train_loss);
        if let Some(dir) = &opts.out_dir {
            let mut tensors = store.named_tensors();
            let mut meta = meta.clone();
            if score < best {
                Checkpoint::new(tensors.clone(), meta.clone()).save(&dir.join(BEST_CHECKPOINT))?;
            }
            meta["progress"] = serde_json::to_value(Progress {
                epoch,
                steps: adam.steps_taken(),
                best_loss: best.min(score),
            })?;
            tensors.extend(adam.state_tensors(store));
            Checkpoint::new(tensors, meta).save(&dir.join(LAST_CHECKPOINT))?;
        }
        if let Some(p) = &log_path {
            append_jsonl(p, &log)?;
        }
        best = best.min(score);
        history.push(log);
        if stopped {
            break;
        }
    }
    Ok(TrainSummary {
        history,
        steps: adam.steps_taken(),
        best_loss: best,
        stopped_by_budget: stopped,
    })
}

/// The dataset's vocabulary, which must list the configured classes.
pub fn dataset_vocab(cfg: &Config, records: &[SceneRecord]) -> Result<Vocab> {
    let vocab = &records
        .first()
        .ok_or_else(|| Error::Validation("dataset is empty".into()))?
        .graph
        .vocab;
    if vocab.objects != cfg.classes {
        return Err(Error::Validation(format!(
            "dataset classes {:?} differ from configured classes {:?}",
            vocab.objects, cfg.classes
        )));
    }
    check_vocab(records, vocab)?;
    Ok(vocab.clone())
}

fn check_vocab(records: &[SceneRecord], vocab: &Vocab) -> Result<()> {
    match records.iter().find(|r| r.graph.vocab != *vocab) {
        Some(r) => Err(Error::Validation(format!(
            "scene {} uses a vocabulary different from the model's",
            r.scene_id
        ))),
        None => Ok(()),
    }
}

fn split(records: &[SceneRecord], which: Split) -> Vec<&SceneRecord> {
    records.iter().filter(|r| r.split == which).collect()
}

/// Prepared predictor examples.
pub struct SgpExamples {
    pub inputs: Vec<SgpInput>,
    pub nodes: Vec<Vec<usize>>,
    pub edges: Vec<Vec<Option<usize>>>,
}

impl SgpExamples {
    pub fn new(records: &[&SceneRecord], margin: f64) -> Result<Self> {
        let mut ex = SgpExamples {
            inputs: Vec::new(),
            nodes: Vec::new(),
            edges: Vec::new(),
        };
        for r in records {
            let input = SgpInput::new(&r.entities, margin)?;
            let (n, e) = targets_from_graph(&input, &r.graph)?;
            ex.inputs.push(input);
            ex.nodes.push(n);
            ex.edges.push(e);
        }
        Ok(ex)
    }
}

/// Fresh predictor sized from `cfg` and the dataset vocabulary.
pub fn new_sgp(cfg: &Config, records: &[SceneRecord]) -> Result<SgpModel> {
    let vocab = dataset_vocab(cfg, records)?;
    let sc = SgpConfig::from_config(cfg, vocab.objects.len(), vocab.predicates.len());
    SgpModel::new(sc, vocab, cfg.margin, derive_seed(cfg.seed, &[0x5697]))
}

/// Trains on the `train` records, validating on `val` records.
pub fn train_sgp(model: &mut SgpModel, records: &[SceneRecord], opts: &TrainOptions) -> Result<TrainSummary> {
    check_vocab(records, &model.vocab)?;
    let (train_records, val_records) = (split(records, Split::Train), split(records, Split::Val));
    let train = SgpExamples::new(&train_records, model.margin)?;
    let val = SgpExamples::new(&val_records, model.margin)?;
    let meta = model.meta();
    let (net, vocab, margin) = (&model.net, &model.vocab, model.margin);
    run(&mut model.params, meta, train.inputs.len(), val.inputs.len(), opts, |store, tape, which, k, _| {
        let ex = if which == Split::Train { &train } else { &val };
        let loss = net.loss(tape, store, &ex.inputs[k], &ex.nodes[k], &ex.edges[k])?;
        Ok(SceneLoss { loss, parts: None })
    }, |store, log| {
        let every = opts.eval_every;
        if every == 0 || ((log.epoch + 1) % every != 0 && log.epoch + 1 != opts.epochs) {
            return Ok(());
        }
        let report = |rs: &[&SceneRecord]| -> Result<Option<RecallSummary>> {
            if rs.is_empty() {
                return Ok(None);
            }
            let mut counts = RecallCounts::default();
            for r in rs {
                let pred = predict_graph(net, store, vocab, margin, &r.entities)?;
                counts.merge(&recall_counts(&pred, &r.graph, None)?);
            }
            Ok(Some((&counts.report(&vocab.objects, &vocab.predicates)).into()))
        };
        log.train_recall = report(&train_records)?;
        log.val_recall = report(&val_records)?;
        Ok(())
    })
}

/// Top-1 recall of the predictor over `records` against their graphs.
pub fn evaluate_sgp(model: &SgpModel, records: &[&SceneRecord]) -> Result<RecallReport> {
    let mut counts = RecallCounts::default();
    for r in records {
        counts.merge(&recall_counts(&model.predict(&r.entities)?, &r.graph, None)?);
    }
    Ok(counts.report(&model.vocab.objects, &model.vocab.predicates))
}

/// Fresh generator with box statistics and shape priors fitted on the
/// training records.
pub fn new_gen(cfg: &Config, records: &[SceneRecord]) -> Result<GenModel> {
    let train: Vec<SceneRecord> = split(records, Split::Train).into_iter().cloned().collect();
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let vocab = dataset_vocab(cfg, records)?;
    let stats = BoxStats::fit(train.iter().flat_map(|r| r.graph.nodes.iter().map(|n| &n.obb)))?;
    let priors = class_priors(&train, &vocab);
    let gc = GenConfig::from_config(cfg, vocab.objects.len(), vocab.predicates.len());
    GenModel::new(gc, vocab, stats, priors, derive_seed(cfg.seed, &[0x6e6e]))
}

fn extended(model: &GenModel, records: &[&SceneRecord]) -> Result<Vec<ExtendedGraph>> {
    records
        .iter()
        .filter(|r| !r.graph.nodes.is_empty())
        .map(|r| model.extend(&r.graph, Some(&r.codes())))
        .collect()
}

pub fn train_gen(model: &mut GenModel, records: &[SceneRecord], opts: &TrainOptions) -> Result<TrainSummary> {
    check_vocab(records, &model.vocab)?;
    let train = extended(model, &split(records, Split::Train))?;
    let val = extended(model, &split(records, Split::Val))?;
    let meta = model.meta();
    let GenModel {
        net,
        params,
        stats,
        ..
    } = model;
    let (net, stats) = (&*net, &*stats);
    run(params, meta, train.len(), val.len(), opts, |store, tape, which, k, rng| {
        let ext = if which == Split::Train { &train[k] } else { &val[k] };
        let dz = net.cfg.latent_dim;
        let eps = crate::autodiff::Tensor::new(
            vec![ext.len(), dz],
            (0..ext.len() * dz).map(|_| rand::Rng::sample(rng, rand_distr::StandardNormal)).collect(),
        )?;
        let lat = net.encode(tape, store, ext, stats, Some(&eps))?;
        let dec = net.decode(tape, store, lat.z, ext)?;
        let t = net.targets(ext, stats)?;
        let parts = crate::vae::vae_loss(tape, &dec, &t, lat.mu, lat.logvar, net.cfg.lambda_recon, net.cfg.lambda_kl)?;
        Ok(SceneLoss {
            loss: parts.total,
            parts: Some((parts.recon, parts.kl)),
        })
    }, |_, _| Ok(()))
}

/// Constraint accuracy of reconstructed layouts against each record's own
/// graph.
pub fn evaluate_gen(model: &GenModel, records: &[&SceneRecord], th: &RelationThresholds) -> Result<ConstraintReport> {
    let layouts = records
        .iter()
        .map(|r| {
            let layout = model.generate(&r.graph, Some(&r.codes()), GenerateMode::Reconstruct, 0)?;
            Ok(layout.nodes.into_iter().map(|n| (n.id, n.obb)).collect::<BTreeMap<_, _>>())
        })
        .collect::<Result<Vec<_>>>()?;
    eval_constraints_many(records.iter().map(|r| &r.graph).zip(&layouts), th)
}

/// Reads the per-epoch log written during training.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochLog>> {
    crate::io_util::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.scenes = 3;
        c.image_dim = 6;
        c.points = 8;
        for (k, v) in [
            ("sgp.model_dim", "8"),
            ("sgp.image_proj", "6"),
            ("sgp.point_dim", "6"),
            ("sgp.point_hidden", "4"),
            ("sgp.heads", "2"),
            ("gen.model_dim", "8"),
            ("gen.latent_dim", "4"),
            ("gen.context_dim", "6"),
            ("gen.class_dim", "3"),
            ("gen.gcn_layers", "1"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = tiny();
        let ds = synth_dataset(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut opts = TrainOptions::sgp(&c);
        opts.epochs = 4;
        opts.batch = 2;
        // A cosine horizon follows `epochs`, so only a constant rate makes a
        // 2 + 2 split comparable with 4 straight epochs.
        opts.schedule = LrSchedule::Constant;
        let mut straight = new_sgp(&c, &ds).unwrap();
        let full = train_sgp(&mut straight, &ds, &opts).unwrap();
        assert_eq!(full.history.len(), 4);

        let mut first = new_sgp(&c, &ds).unwrap();
        opts.out_dir = Some(dir.path().to_path_buf());
        opts.epochs = 2;
        train_sgp(&mut first, &ds, &opts).unwrap();
        let mut resumed = new_sgp(&c, &ds).unwrap();
        opts.epochs = 4;
        opts.resume = Some(dir.path().join(LAST_CHECKPOINT));
        let rest = train_sgp(&mut resumed, &ds, &opts).unwrap();
        assert_eq!(rest.history.len(), 2);
        assert_eq!(resumed.params.named_tensors(), straight.params.named_tensors());
        assert_eq!(read_metrics(&dir.path().join(METRICS_LOG)).unwrap().len(), 4);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn recall_logged_on_schedule_and_last_epoch() {
        let c = tiny();
        let ds = synth_dataset(&c).unwrap();
        let mut opts = TrainOptions::sgp(&c);
        opts.epochs = 4;
        opts.eval_every = 3;
        let mut m = new_sgp(&c, &ds).unwrap();
        let s = train_sgp(&mut m, &ds, &opts).unwrap();
        let logged: Vec<bool> = s.history.iter().map(|h| h.train_recall.is_some()).collect();
        assert_eq!(logged, [false, false, true, true]);
    }

    #[test]
    fn generator_training_reports_nonnegative_kl() {
        let c = tiny();
        let ds = synth_dataset(&c).unwrap();
        let mut m = new_gen(&c, &ds).unwrap();
        let mut opts = TrainOptions::gen(&c);
        opts.epochs = 2;
        let s = train_gen(&mut m, &ds, &opts).unwrap();
        assert!(s.history.iter().all(|h| h.kl_min.unwrap() >= 0.0 && h.train_loss.is_finite()));
        assert_eq!(s.steps, 2 * ds.iter().filter(|r| r.split == Split::Train).count().div_ceil(opts.batch) as u64);
    }

    #[test]
    fn budget_stops_early_and_empty_split_fails() {
        let c = tiny();
        let ds = synth_dataset(&c).unwrap();
        let mut m = new_sgp(&c, &ds).unwrap();
        let mut opts = TrainOptions::sgp(&c);
        opts.epochs = 1000;
        opts.time_budget = 1e-9;
        let s = train_sgp(&mut m, &ds, &opts).unwrap();
        assert!(s.stopped_by_budget && s.history.len() == 1);
        let val_only: Vec<SceneRecord> = ds.iter().cloned().map(|mut r| {
            r.split = Split::Val;
            r
        }).collect();
        assert!(train_sgp(&mut m, &val_only, &opts).is_err());
    }
}
