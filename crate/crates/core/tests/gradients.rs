mod common;

use std::time::Instant;

#[test]
fn ops_match_finite_differences() {
    for (name, r) in common::gradients::op_cases().unwrap() {
        assert!(r.passes(1e-6), "{name}: {r:?}");
    }
}

#[test]
fn modules_match_finite_differences() {
    let t = Instant::now();
    for (name, r) in common::gradients::module_cases().unwrap() {
        println!("{name:<24} checked {:>4} skipped {:>3} max rel {:.2e}", r.checked, r.skipped, r.max_rel_error);
        assert!(r.passes(1e-4), "{name}: {r:?}");
    }
    assert!(t.elapsed().as_secs() < 120);
}
