//! Shared helpers for the integration tests: independent geometry and
//! constraint oracles, and the gradient-check suite.

#![allow(dead_code)]

pub mod fusion_props;
pub mod gradients;
pub mod oracles;
pub mod serial;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgforge::autodiff::Tensor;
use sgforge::config::Config;
use sgforge::Obb;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Box with arbitrary yaw, centroid within `spread` of the origin in the
/// plane and dims in `[0.2, 2]`.
pub fn random_obb(rng: &mut impl Rng, spread: f64) -> Obb {
    let c = [
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(0.0..1.0),
    ];
    let d = [
        rng.random_range(0.2..2.0),
        rng.random_range(0.2..2.0),
        rng.random_range(0.2..2.0),
    ];
    Obb::new(c, d, rng.random_range(0.0..std::f64::consts::TAU)).unwrap()
}

/// Small model sizes for fast tests.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("synth.scenes", "4"),
        ("synth.image_dim", "6"),
        ("synth.points", "8"),
        ("synth.train_fraction", "1.0"),
        ("synth.val_fraction", "0.0"),
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
