//! Finite-difference gradient checks (the full ten-seed sweep runs in the
//! acceptance suite).

use ocean_core::autodiff::Graph;
use ocean_core::gradcheck::{grad_check, relative_error};
use ocean_core::gradsuite::{end_to_end_check, op_checks, OP_TOL};
use ocean_core::Tensor;

#[test]
fn every_op_passes_for_one_seed() {
    for (name, r) in op_checks(0).unwrap() {
        assert!(r.pass, "{}: {:?}", name, r);
        assert!(r.checked > 0, "{}", name);
    }
}

#[test]
fn composite_loss_passes_for_one_seed() {
    let r = end_to_end_check(1).unwrap();
    assert!(r.pass, "{:?}", r);
}

#[test]
fn a_wrong_gradient_is_caught() {
    // Multiplying by a constant copy of x makes the analytic derivative x
    // while the loss is x^2, so every element is off by a factor of two.
    let x = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
    let r = grad_check(
        |g: &mut Graph, p| {
            let v = g.value(p[0]).clone();
            let c = g.constant(v);
            let y = g.mul(p[0], c)?;
            g.sum(y)
        },
        &[("x", x)],
        OP_TOL,
    )
    .unwrap();
    assert!(!r.pass);
    assert!((r.max_rel_err - 0.5).abs() < 1e-6);
}

#[test]
fn relative_error_is_symmetric_and_floored() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert_eq!(relative_error(2.0, 1.0), relative_error(1.0, 2.0));
    assert!(relative_error(1e-12, 2e-12) < 1e-5);
}
