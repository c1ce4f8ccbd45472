//! Flat `key = value` configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Lists are comma
//! separated. Unknown keys are rejected so typos surface immediately.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::LrSchedule;
use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, bool, String, LrSchedule);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = s.parse::<f64>().map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<String> = s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
        if v.is_empty() {
            Err("list is empty".into())
        } else {
            Ok(v)
        }
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

macro_rules! config {
    ($( $(#[doc = $doc:expr])* $field:ident : $ty:ty = $key:literal => $default:expr ),* $(,)?) => {
        /// Every tunable setting. See [`Config::dump`] for keys and defaults.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $field: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$field.render()), )*
                    _ => None,
                }
            }

            /// All keys with current values, one `key = value` line each.
            pub fn dump(&self) -> String {
                let mut s = String::new();
                $( let _ = writeln!(s, "{} = {}", $key, self.$field.render()); )*
                s
            }
        }
    };
}

config! {
    seed: u64 = "seed" => 7,

    /// Object classes of the synthetic vocabulary.
    classes: Vec<String> = "synth.classes" => [
        "table", "chair", "sofa", "bed", "cabinet", "lamp", "desk", "shelf",
        "tv_stand", "nightstand", "wardrobe", "plant",
    ].map(String::from).to_vec(),
    scenes: usize = "synth.scenes" => 32,
    min_objects: usize = "synth.min_objects" => 8,
    max_objects: usize = "synth.max_objects" => 12,
    room_x: f64 = "synth.room_x" => 7.0,
    room_y: f64 = "synth.room_y" => 6.0,
    image_dim: usize = "synth.image_dim" => 64,
    image_noise: f64 = "synth.image_noise" => 0.3,
    points: usize = "synth.points" => 48,
    point_noise: f64 = "synth.point_noise" => 0.01,
    /// Probability that a placement adds a mirrored twin.
    mirror_prob: f64 = "synth.mirror_prob" => 0.25,
    /// Standard deviation of noise added to ground-truth shape codes.
    shape_noise: f64 = "synth.shape_noise" => 0.0,
    train_fraction: f64 = "synth.train_fraction" => 0.8,
    val_fraction: f64 = "synth.val_fraction" => 0.2,
    max_tries: usize = "synth.max_tries" => 10_000,

    margin: f64 = "graph.margin" => 0.5,
    close_by: f64 = "relations.close_by" => 0.45,
    sym_dim_ratio: f64 = "relations.sym_dim_ratio" => 1.1,
    sym_yaw_tol: f64 = "relations.sym_yaw_tol" => 0.45,

    sgp_model_dim: usize = "sgp.model_dim" => 256,
    sgp_image_proj: usize = "sgp.image_proj" => 256,
    sgp_point_dim: usize = "sgp.point_dim" => 256,
    sgp_point_hidden: usize = "sgp.point_hidden" => 64,
    sgp_heads: usize = "sgp.heads" => 4,
    sgp_layers: usize = "sgp.layers" => 2,
    sgp_epochs: usize = "sgp.epochs" => 60,
    sgp_batch: usize = "sgp.batch" => 4,
    sgp_lr: f64 = "sgp.lr" => 1e-3,
    sgp_clip: f64 = "sgp.clip" => 5.0,
    /// `constant` or `cosine`.
    /// Epochs between recall evaluations in the metrics log; 0 disables them.
    sgp_eval_every: usize = "sgp.eval_every" => 5,
    sgp_lr_schedule: LrSchedule = "sgp.lr_schedule" => LrSchedule::Cosine,
    /// Wall-clock budget in seconds; 0 disables the limit.
    sgp_time_budget: f64 = "sgp.time_budget" => 0.0,

    gen_model_dim: usize = "gen.model_dim" => 256,
    gen_latent_dim: usize = "gen.latent_dim" => 64,
    gen_context_dim: usize = "gen.context_dim" => 128,
    gen_class_dim: usize = "gen.class_dim" => 64,
    gen_gcn_layers: usize = "gen.gcn_layers" => 5,
    gen_yaw_bins: usize = "gen.yaw_bins" => 24,
    lambda_recon: f64 = "gen.lambda_recon" => 1.0,
    lambda_kl: f64 = "gen.lambda_kl" => 0.1,
    gen_epochs: usize = "gen.epochs" => 300,
    gen_batch: usize = "gen.batch" => 8,
    gen_lr: f64 = "gen.lr" => 1e-3,
    gen_clip: f64 = "gen.clip" => 5.0,
    gen_lr_schedule: LrSchedule = "gen.lr_schedule" => LrSchedule::Constant,
    gen_time_budget: f64 = "gen.time_budget" => 0.0,
}

impl Config {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let v = v.trim().trim_matches('"');
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c = Config::parse(&text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return bad(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.scenes < 1 {
            return bad("synth.scenes must be at least 1".into());
        }
        if (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-9
            || self.train_fraction < 0.0
            || self.val_fraction < 0.0
        {
            return bad("synth.train_fraction and synth.val_fraction must be nonnegative and sum to 1".into());
        }
        if self.points < 8 {
            return bad("synth.points must be at least 8".into());
        }
        if self.room_x <= 0.0 || self.room_y <= 0.0 || self.margin < 0.0 {
            return bad("room extents must be positive and the margin nonnegative".into());
        }
        if self.sgp_heads == 0 || !self.sgp_model_dim.is_multiple_of(self.sgp_heads) {
            return bad(format!(
                "sgp.model_dim {} must be divisible by sgp.heads {}",
                self.sgp_model_dim, self.sgp_heads
            ));
        }
        if self.sgp_layers == 0 || self.gen_gcn_layers == 0 {
            return bad("layer counts must be at least 1".into());
        }
        if self.gen_yaw_bins < 1 {
            return bad("gen.yaw_bins must be at least 1".into());
        }
        if self.sgp_batch == 0 || self.gen_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        Ok(())
    }

    pub fn thresholds(&self) -> crate::metrics::RelationThresholds {
        crate::metrics::RelationThresholds {
            close_by: self.close_by,
            sym_dim_ratio: self.sym_dim_ratio,
            sym_yaw_tol: self.sym_yaw_tol,
        }
    }
}
