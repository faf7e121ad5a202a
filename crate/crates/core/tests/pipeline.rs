//! Cross-module pipeline tests at small scale: the acceptance suite in the
//! CLI crate repeats these at full size.

use nalgebra::{DMatrix, DVector};

use nlbt_core::builtins;
use nlbt_core::lyapunov::LvWeight;
use nlbt_core::{
    balance, certify_inequality, compute_gramians, eval_lv_cert, simulate_coupled, truncate,
    ControlSignal, QuadraticCertificate, SamplingPlan, SimGrid, Which,
};

#[test]
fn balanced_realization_preserves_input_output() {
    let builtin = builtins::example1(3);
    let sys = builtin.system;
    let cert = QuadraticCertificate::identity(3, 1, builtin.delta);
    let plan = SamplingPlan::new(2000, 1);
    let gp = compute_gramians(&sys, &cert, &plan).unwrap();
    let bal = balance(&sys, &gp).unwrap();

    let u = ControlSignal::sinusoid(vec![1.0], vec![std::f64::consts::PI], 1.0).unwrap();
    let grid = SimGrid::new(1.0, 1000, 200, 11).unwrap();
    let paired = simulate_coupled(
        &sys,
        &bal.system,
        &u,
        &DVector::zeros(3),
        &DVector::zeros(3),
        &grid,
    )
    .unwrap();
    assert!(
        paired.mc_error <= 1e-8,
        "balanced output deviates: {}",
        paired.mc_error
    );
}

#[test]
fn identity_truncation_is_pathwise_identical() {
    let builtin = builtins::example1(3);
    let sys = builtin.system;
    let cert = QuadraticCertificate::identity(3, 1, 1.0);
    let plan = SamplingPlan::new(1000, 2);
    let gp = compute_gramians(&sys, &cert, &plan).unwrap();
    let bal = balance(&sys, &gp).unwrap();
    let red = truncate(&bal, 3).unwrap();

    let u = ControlSignal::sinusoid(vec![1.0], vec![2.0], 1.0).unwrap();
    let grid = SimGrid::new(1.0, 500, 100, 13).unwrap();
    let paired = simulate_coupled(
        &sys,
        &red.system,
        &u,
        &DVector::zeros(3),
        &DVector::zeros(3),
        &grid,
    )
    .unwrap();
    assert!(paired.mc_error <= 1e-8, "r = n error {}", paired.mc_error);
}

#[test]
fn reduced_sigma1_certifies_both_inequalities() {
    let builtin = builtins::example1(4);
    let sys = builtin.system;
    let cert = QuadraticCertificate::identity(4, 1, 1.0);
    let plan = SamplingPlan::new(3000, 3);
    let gp = compute_gramians(&sys, &cert, &plan).unwrap();
    let bal = balance(&sys, &gp).unwrap();
    for r in 1..=4usize {
        let red = truncate(&bal, r).unwrap();
        let sigma1 = DMatrix::from_diagonal(&red.sigma1);
        let reach =
            certify_inequality(&red.system, &cert, &sigma1, Which::Reach, &plan, 1e-8).unwrap();
        assert!(
            reach.pass,
            "r = {r} reach residual {}",
            reach.max_residual
        );
        let obs = certify_inequality(&red.system, &cert, &sigma1, Which::Obs, &plan, 1e-8).unwrap();
        assert!(obs.pass, "r = {r} obs residual {}", obs.max_residual);
    }
}

#[test]
fn lyapunov_operator_is_invariant_under_the_transform() {
    // LV_X(x, y) of the original equals LV of the balanced system with the
    // congruent weight at the transformed points.
    let builtin = builtins::example1(3);
    let sys = builtin.system;
    let cert = QuadraticCertificate::identity(3, 1, 1.0);
    let plan = SamplingPlan::new(1000, 4);
    let gp = compute_gramians(&sys, &cert, &plan).unwrap();
    let bal = balance(&sys, &gp).unwrap();

    let x = DVector::from_vec(vec![0.4, -0.8, 1.2]);
    let y = DVector::from_vec(vec![-0.3, 0.2, 0.5]);
    let lv_orig = eval_lv_cert(&sys, &cert, &x, &y).unwrap();

    let w_trans = bal.s_inv.transpose() * &cert.x * &bal.s_inv;
    let weight = LvWeight::from_spd((&w_trans + w_trans.transpose()) * 0.5).unwrap();
    let lv_bal = nlbt_core::lyapunov::eval_lv(
        &bal.system,
        &weight,
        cert.delta,
        &(&bal.s * &x),
        &(&bal.s * &y),
    )
    .unwrap();
    assert!(
        (lv_orig - lv_bal).abs() <= 1e-9 * (1.0 + lv_orig.abs()),
        "{lv_orig} vs {lv_bal}"
    );
}
