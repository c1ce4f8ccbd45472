//! Named trainable parameters, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout: the magic bytes `SGF1`, a little-endian `u64` byte
//! length, a UTF-8 JSON manifest of that length, then the payload of
//! little-endian `f64` values. The manifest lists every tensor's name, shape
//! and byte offset into the payload, plus a free-form `meta` object.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGF1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix reserved for optimizer state inside checkpoints.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Validation(format!("parameter {name:?} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a `[rows, cols]` tensor drawn from `U(-b, b)`, `b = 1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: [usize; 2], fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..shape[0] * shape[1])
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Replaces every parameter from `tensors`. Names under [`OPTIM_PREFIX`]
    /// are ignored. Nothing is modified unless names and shapes match exactly.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let provided: BTreeSet<&str> = tensors
            .keys()
            .map(String::as_str)
            .filter(|n| !n.starts_with(OPTIM_PREFIX))
            .collect();
        let expected: BTreeSet<&str> = self.by_name.keys().map(String::as_str).collect();
        let missing: Vec<&str> = expected.difference(&provided).copied().collect();
        let extra: Vec<&str> = provided.difference(&expected).copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter names differ; missing: [{}]; unexpected: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        let mut bad_shapes = Vec::new();
        for p in &self.params {
            let t = &tensors[&p.name];
            if t.shape() != p.value.shape() {
                bad_shapes.push(format!("{} {:?} != {:?}", p.name, t.shape(), p.value.shape()));
            }
        }
        if !bad_shapes.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter shapes differ: {}",
                bad_shapes.join("; ")
            )));
        }
        for p in &mut self.params {
            p.value = tensors[&p.name].clone();
        }
        Ok(())
    }
}

/// Sums gradients over the examples of a batch, in the order they are added.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: vec![None; store.len()],
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &Gradients, tape: &Tape) {
        for (id, g) in grads.param_grads(tape) {
            match &mut self.sums[id.index()] {
                Some(s) => s.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient per parameter (zeros for parameters never touched).
    pub fn mean(&self, store: &ParamStore) -> Vec<Tensor> {
        let n = self.count.max(1) as f64;
        store
            .ids()
            .map(|id| match &self.sums[id.index()] {
                Some(s) => s.map(|v| v / n),
                None => Tensor::zeros(store.value(id).shape()),
            })
            .collect()
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at epoch 0 towards zero at `epochs`.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown learning-rate schedule {s:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with per-parameter gradients indexed like the store.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> f64 {
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }

    /// Moment tensors keyed `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for id in store.ids() {
            let name = store.name(id);
            out.insert(format!("{OPTIM_PREFIX}m.{name}"), self.m[id.index()].clone());
            out.insert(format!("{OPTIM_PREFIX}v.{name}"), self.v[id.index()].clone());
        }
        out
    }

    pub fn restore(
        config: AdamConfig,
        store: &ParamStore,
        tensors: &BTreeMap<String, Tensor>,
        step: u64,
    ) -> Result<Self> {
        let mut adam = Adam::new(config, store);
        for id in store.ids() {
            let name = store.name(id);
            for (slot, kind) in [(&mut adam.m, "m"), (&mut adam.v, "v")] {
                let key = format!("{OPTIM_PREFIX}{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if t.shape() != store.value(id).shape() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                slot[id.index()] = t.clone();
            }
        }
        adam.step = step;
        Ok(adam)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Named tensors plus metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>, meta: serde_json::Value) -> Self {
        Checkpoint { tensors, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: CHECKPOINT_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err("bad magic bytes"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(12..12usize.checked_add(len).ok_or_else(|| err("manifest length overflow"))?)
            .ok_or_else(|| err("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        let payload = &bytes[12 + len..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in manifest.tensors {
            let count: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(err("non-contiguous tensor offsets"));
            }
            let start = e.offset as usize;
            let end = start + 8 * count;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_offset = end as u64;
            if tensors.insert(e.name.clone(), Tensor::new(e.shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
        }
        if payload.len() as u64 != expected_offset {
            return Err(err("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
