use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};

use nlbt_core::builtins;
use nlbt_core::gramian::{estimate_lipschitz_data, LipschitzMode};
use nlbt_core::{
    balance, certify_inequality, compute_gramians, simulate, solve_generalized_lyapunov,
    ControlSignal, QuadraticCertificate, SamplingPlan, SimGrid, Which,
};

fn bench_lyapunov_solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("generalized_lyapunov");
    for &n in &[4usize, 8, 16] {
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { -3.0 } else { 0.1 / (1 + i + j) as f64 });
        let nd = DMatrix::from_fn(n, n, |i, j| if i == j { 0.1 } else { 0.0 / (1 + i + j) as f64 });
        let k = DMatrix::identity(1, 1);
        let rhs = DMatrix::identity(n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                solve_generalized_lyapunov(black_box(&a), &[nd.clone()], &k, &rhs).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_certification(c: &mut Criterion) {
    let builtin = builtins::example1(6);
    let sys = builtin.system;
    let cert = QuadraticCertificate::identity(6, 1, 1.0);
    let plan = SamplingPlan::new(1000, 1);
    let lip = estimate_lipschitz_data(&sys, &cert, &plan, LipschitzMode::Full).unwrap();
    let p = &cert.x.clone().try_inverse().unwrap()
        / (lip.lambda * 1.0 / (2.0 * (lip.c_b * lip.c_b)));
    c.bench_function("certify_1000_pairs", |b| {
        b.iter(|| {
            certify_inequality(&sys, &cert, black_box(&p), Which::Reach, &plan, 1e-9).unwrap()
        })
    });
}

fn bench_balance(c: &mut Criterion) {
    let builtin = builtins::example1(6);
    let sys = builtin.system;
    let cert = QuadraticCertificate::identity(6, 1, 1.0);
    let plan = SamplingPlan::new(500, 2);
    let gp = compute_gramians(&sys, &cert, &plan).unwrap();
    c.bench_function("balance_n6", |b| {
        b.iter(|| balance(black_box(&sys), &gp).unwrap())
    });
}

fn bench_simulation(c: &mut Criterion) {
    let builtin = builtins::example1(6);
    let sys = builtin.system;
    let u = ControlSignal::sinusoid(vec![1.0], vec![std::f64::consts::PI], 1.0).unwrap();
    let x0 = DVector::zeros(6);
    let grid = SimGrid::new(1.0, 500, 64, 3).unwrap();
    c.bench_function("simulate_64_paths_500_steps", |b| {
        b.iter(|| simulate(black_box(&sys), &u, &x0, &grid).unwrap())
    });
}

criterion_group!(
    benches,
    bench_lyapunov_solver,
    bench_certification,
    bench_balance,
    bench_simulation
);
criterion_main!(benches);
