//! Central finite-difference gradient checks.
//!
//! The error for one coordinate is `|analytic − numeric| / max(|analytic|,
//! |numeric|, floor)`; the floor keeps gradients that are zero up to rounding
//! from producing meaningless ratios. Coordinates whose ±ε evaluations land on
//! different piecewise branches (ReLU/abs/clamp/max-pool decisions, read from
//! [`Tape::branch_signature`]) are skipped: the function is not differentiable
//! across those kinks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub floor: f64,
    /// Maximum coordinates checked per parameter tensor (sampled when larger).
    pub max_per_param: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-5,
            floor: 1e-3,
            max_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Compares `backward` with central differences for every parameter in
/// `store` that `f` uses. `f` must build a single-element loss on the tape.
pub fn check<F>(store: &mut ParamStore, cfg: GradcheckConfig, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?.param_grads(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport::default();

    let eval = |store: &ParamStore| -> Result<(f64, Vec<u64>)> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok((t.value(l).item(), t.branch_signature()))
    };

    for (id, g) in grads {
        let n = g.len();
        let coords: Vec<usize> = if n <= cfg.max_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + cfg.eps;
            let (plus, sig_p) = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - cfg.eps;
            let (minus, sig_m) = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let analytic = g.data()[c];
            let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), c));
                }
            }
        }
    }
    Ok(report)
}

/// Registers `tensors` as parameters named `input.<i>` and returns their ids;
/// convenient for checking gradients with respect to op inputs.
pub fn inputs_as_params(store: &mut ParamStore, tensors: Vec<super::tensor::Tensor>) -> Result<Vec<ParamId>> {
    tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.register(&format!("input.{i}"), t))
        .collect()
}
