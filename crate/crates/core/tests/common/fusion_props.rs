//! Algebraic properties of the confidence-weighted running mean, each run
//! over `cases` seeded random sequences.

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use sgforge::fusion::{fuse_value, FusionState};
use sgforge::graph::PHI_MAX;
use sgforge::{ClassDistribution, Obb, SceneGraph, SceneGraphNode, Vocab};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn pair(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (vec(-10.0..10.0f64, d), vec(-10.0..10.0f64, d))
}

/// Equal weights give the plain average.
pub fn equal_weight_mean(cases: u32) -> Result<(), String> {
    let s = (1usize..8).prop_flat_map(|d| (pair(d), 0.01..1000.0f64));
    runner(cases)
        .run(&s, |((a, b), phi)| {
            let (u, _) = fuse_value(&a, phi, &b, phi, PHI_MAX).unwrap();
            for k in 0..a.len() {
                let want = 0.5 * (a[k] + b[k]);
                ensure((u[k] - want).abs() <= 1e-12 * (1.0 + want.abs()), || {
                    format!("component {k}: {} vs {want}", u[k])
                })?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Unit-weight observations below the cap reproduce the batch mean.
pub fn running_mean(cases: u32) -> Result<(), String> {
    let s = (1usize..6).prop_flat_map(|d| vec(vec(-5.0..5.0f64, d), 1..=100));
    runner(cases)
        .run(&s, |seq| {
            let (mut u, mut phi) = (seq[0].clone(), 1.0);
            for x in &seq[1..] {
                (u, phi) = fuse_value(x, 1.0, &u, phi, PHI_MAX).unwrap();
            }
            ensure(phi == seq.len() as f64, || format!("weight {phi} after {} steps", seq.len()))?;
            for k in 0..u.len() {
                let mean = seq.iter().map(|x| x[k]).sum::<f64>() / seq.len() as f64;
                ensure((u[k] - mean).abs() <= 1e-12, || format!("{} vs batch mean {mean}", u[k]))?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// The same through the graph-level fusion of class distributions.
pub fn running_mean_of_distributions(cases: u32) -> Result<(), String> {
    let vocab = Vocab::new(vec!["a".into(), "b".into(), "c".into()], vec!["p".into()]).unwrap();
    let s = vec(vec(0.01..1.0f64, 3), 1..=60);
    runner(cases)
        .run(&s, |rows| {
            let mut state = FusionState::new(vocab.clone());
            let dists: Vec<ClassDistribution> = rows.iter().map(|r| ClassDistribution::normalized(r.clone()).unwrap()).collect();
            for d in &dists {
                let node = SceneGraphNode {
                    id: 0,
                    class_dist: d.clone(),
                    obb: Obb::new([0.0, 0.0, 0.5], [1.0; 3], 0.0).unwrap(),
                    feature: vec![],
                    fusion_weight: 1.0,
                };
                let local = SceneGraph::new(vocab.clone(), vec![node], vec![]).unwrap();
                state.fuse(&local, None).unwrap();
            }
            let got = &state.global.nodes[0];
            ensure(got.fusion_weight == dists.len() as f64, || format!("weight {}", got.fusion_weight))?;
            for k in 0..3 {
                let mean = dists.iter().map(|d| d.probs()[k]).sum::<f64>() / dists.len() as f64;
                ensure((got.class_dist.probs()[k] - mean).abs() <= 1e-12, || {
                    format!("class {k}: {} vs {mean}", got.class_dist.probs()[k])
                })?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Weights never decrease, never exceed 100, and saturate at exactly 100.
pub fn weight_cap(cases: u32) -> Result<(), String> {
    let s = vec(0.01..80.0f64, 1..40);
    runner(cases)
        .run(&s, |weights| {
            let mut phi = 0.0;
            let mut total = 0.0;
            for w in weights {
                let (_, next) = fuse_value(&[0.0], w, &[0.0], phi, PHI_MAX).unwrap();
                total += w;
                ensure(next >= phi && next <= 100.0, || format!("{phi} -> {next}"))?;
                if total >= 100.0 {
                    ensure(next == 100.0, || format!("expected the cap, got {next}"))?;
                }
                phi = next;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// At the cap, a unit-weight observation moves each component by at most
/// `|u_t − u_prev| / 101`.
pub fn capped_update_bound(cases: u32) -> Result<(), String> {
    let s = (1usize..8).prop_flat_map(|d| vec(vec(-10.0..10.0f64, d), 2..30));
    runner(cases)
        .run(&s, |seq| {
            let (mut u, mut phi) = (seq[0].clone(), 100.0);
            for x in &seq[1..] {
                let (next, p) = fuse_value(x, 1.0, &u, phi, PHI_MAX).unwrap();
                ensure(p == 100.0, || format!("weight left the cap: {p}"))?;
                for k in 0..u.len() {
                    let bound = (x[k] - u[k]).abs() / 101.0;
                    let moved = (next[k] - u[k]).abs();
                    // Rounding slack: a few ulps of the operands.
                    let slack = 1e-15 * (1.0 + x[k].abs() + u[k].abs());
                    ensure(moved <= bound + slack, || {
                        format!("moved {moved} with bound {bound}")
                    })?;
                }
                (u, phi) = (next, p);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("equal-weight mean", equal_weight_mean(cases)),
        ("running mean", running_mean(cases)),
        ("running mean of distributions", running_mean_of_distributions(cases)),
        ("weight cap", weight_cap(cases)),
        ("capped update bound", capped_update_bound(cases)),
    ]
}
