//! Central finite-difference checks for every differentiable op, 20 seeds each.

use kpanim_core::tensor::grad_suite::{op_suite, run_case, stop_gradient_error, SUITE_SEEDS};
use kpanim_core::tensor::gradcheck::GradCheckConfig;

#[test]
fn every_op_passes_finite_differences() {
    let mut failed = Vec::new();
    for c in op_suite() {
        let r = run_case(&c, SUITE_SEEDS, GradCheckConfig::default()).unwrap();
        println!("{:<22} max rel err {:.2e} (tol {:.0e})", r.name, r.worst, r.tol);
        if !r.passed() {
            failed.push(r);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn stop_gradient_matches_frozen_composite() {
    assert!(stop_gradient_error(SUITE_SEEDS).unwrap() < 1e-8);
}

#[test]
fn corrupted_kernel_is_caught() {
    let cfg = GradCheckConfig {
        corrupt: 1e-3,
        ..GradCheckConfig::default()
    };
    let suite = op_suite();
    let conv = suite.iter().find(|c| c.name == "conv2d").unwrap();
    assert!(!run_case(conv, 2, cfg).unwrap().passed());
}
