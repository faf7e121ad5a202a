//! Euler-Maruyama Monte Carlo simulation.
//!
//! `x_{k+1} = x_k + [f(x_k) + B u(t_k) + G(x_k) u(t_k)] dt
//!            + [Gamma(x_k) + M(u(t_k))] K^{1/2} xi_k sqrt(dt)`
//!
//! with iid standard normal `xi_k`. Every path owns a counter-seeded RNG
//! stream derived from `(seed, path index)`, so increments are identical
//! across runs and worker counts, and two systems driven in lockstep see
//! exactly the same noise (common random numbers). Statistics are reduced
//! per batch in fixed index order and combined pairwise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{multiplicative_control, ControlSignal, StochasticSystem};

/// A state norm beyond this flags the path as divergent.
pub const EXPLOSION_THRESHOLD: f64 = 1e12;

/// Fraction of flagged paths beyond which the ensemble aborts.
const DIVERGENCE_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimGrid {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub t0: f64,
    /// Tamed Euler variant (drift scaled by `1/(1 + dt ||f(x)||)`); off by
    /// default, recorded in results metadata.
    #[serde(default)]
    pub tamed: bool,
}

impl SimGrid {
    pub fn new(horizon: f64, steps: usize, paths: usize, seed: u64) -> Result<Self> {
        let grid = Self {
            horizon,
            steps,
            paths,
            seed,
            t0: 0.0,
            tamed: false,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || self.steps == 0 {
            return Err(Error::InvalidInput(
                "simulation grid needs horizon > 0 and steps >= 1".into(),
            ));
        }
        if self.paths == 0 {
            return Err(Error::InvalidInput("paths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps).map(|k| self.t0 + k as f64 * dt).collect()
    }
}

/// Independent per-path RNG stream.
fn path_rng(seed: u64, path: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    key[16..24].copy_from_slice(&0x4e4c_4254u64.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Contiguous path ranges: at most 20 batches, at least 10 when the
/// ensemble allows (batch standard errors need independent batches).
fn batch_ranges(paths: usize) -> Vec<(u64, u64)> {
    let b = paths.min(20).max(1);
    let base = paths / b;
    let rem = paths % b;
    let mut out = Vec::with_capacity(b);
    let mut start = 0u64;
    for i in 0..b {
        let len = base + usize::from(i < rem);
        out.push((start, start + len as u64));
        start += len as u64;
    }
    out
}

struct BatchAccum {
    series: Vec<Vec<f64>>,
    scalars: Vec<f64>,
    count: usize,
    divergent: usize,
}

impl BatchAccum {
    fn new(n_series: usize, len: usize, n_scalars: usize) -> Self {
        Self {
            series: vec![vec![0.0; len]; n_series],
            scalars: vec![0.0; n_scalars],
            count: 0,
            divergent: 0,
        }
    }

    fn merge(mut self, other: BatchAccum) -> BatchAccum {
        for (a, b) in self.series.iter_mut().zip(&other.series) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (x, y) in self.scalars.iter_mut().zip(&other.scalars) {
            *x += *y;
        }
        self.count += other.count;
        self.divergent += other.divergent;
        self
    }
}

/// Ensemble means with batch standard errors.
pub struct EnsembleStats {
    pub series_mean: Vec<Vec<f64>>,
    pub series_se: Vec<Vec<f64>>,
    pub scalar_mean: Vec<f64>,
    pub scalar_se: Vec<f64>,
    pub count: usize,
    pub divergent: usize,
}

/// Run `per_path` over all paths, batched and deterministically reduced.
/// The closure fills one value per series per time index plus the scalars,
/// returning `false` when the path diverged (its contributions are dropped).
fn run_ensemble<F>(
    grid: &SimGrid,
    n_series: usize,
    series_len: usize,
    n_scalars: usize,
    per_path: F,
) -> Result<EnsembleStats>
where
    F: Fn(u64, &mut [Vec<f64>], &mut [f64]) -> bool + Sync,
{
    grid.validate()?;
    let ranges = batch_ranges(grid.paths);
    let batch_results: Vec<BatchAccum> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = BatchAccum::new(n_series, series_len, n_scalars);
            let mut scratch_series = vec![vec![0.0; series_len]; n_series];
            let mut scratch_scalars = vec![0.0; n_scalars];
            for path in lo..hi {
                for s in scratch_series.iter_mut() {
                    s.iter_mut().for_each(|v| *v = 0.0);
                }
                scratch_scalars.iter_mut().for_each(|v| *v = 0.0);
                let ok = per_path(path, &mut scratch_series, &mut scratch_scalars);
                if ok {
                    for (a, b) in acc.series.iter_mut().zip(&scratch_series) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += *y;
                        }
                    }
                    for (x, y) in acc.scalars.iter_mut().zip(&scratch_scalars) {
                        *x += *y;
                    }
                    acc.count += 1;
                } else {
                    acc.divergent += 1;
                }
            }
            acc
        })
        .collect();

    let divergent: usize = batch_results.iter().map(|b| b.divergent).sum();
    let count: usize = batch_results.iter().map(|b| b.count).sum();
    if divergent as f64 > DIVERGENCE_FRACTION * grid.paths as f64 {
        return Err(Error::DivergentEnsemble {
            flagged: divergent,
            paths: grid.paths,
        });
    }
    if count == 0 {
        return Err(Error::SimulationFailure {
            detail: "no surviving paths".into(),
        });
    }

    // batch means (owned) for standard errors
    struct BatchMeans {
        series: Vec<Vec<f64>>,
        scalars: Vec<f64>,
    }
    let live: Vec<BatchMeans> = batch_results
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| BatchMeans {
            series: b
                .series
                .iter()
                .map(|s| s.iter().map(|v| v / b.count as f64).collect())
                .collect(),
            scalars: b.scalars.iter().map(|v| v / b.count as f64).collect(),
        })
        .collect();
    let nb = live.len();
    let mut series_se = vec![vec![0.0; series_len]; n_series];
    let mut scalar_se = vec![0.0; n_scalars];

    // pairwise (tree) combine in batch order for the totals
    let mut queue: Vec<BatchAccum> = batch_results;
    while queue.len() > 1 {
        let mut next = Vec::with_capacity(queue.len().div_ceil(2));
        let mut it = queue.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(b)),
                None => next.push(a),
            }
        }
        queue = next;
    }
    let total = queue.pop().expect("non-empty batch list");

    let series_mean: Vec<Vec<f64>> = total
        .series
        .iter()
        .map(|s| s.iter().map(|v| v / count as f64).collect())
        .collect();
    let scalar_mean: Vec<f64> = total.scalars.iter().map(|v| v / count as f64).collect();

    if nb >= 2 {
        for si in 0..n_series {
            for t in 0..series_len {
                let mean_of_means: f64 =
                    live.iter().map(|b| b.series[si][t]).sum::<f64>() / nb as f64;
                let var: f64 = live
                    .iter()
                    .map(|b| {
                        let d = b.series[si][t] - mean_of_means;
                        d * d
                    })
                    .sum::<f64>()
                    / ((nb - 1) as f64 * nb as f64);
                series_se[si][t] = var.max(0.0).sqrt();
            }
        }
        for sc in 0..n_scalars {
            let mean_of_means: f64 = live.iter().map(|b| b.scalars[sc]).sum::<f64>() / nb as f64;
            let var: f64 = live
                .iter()
                .map(|b| {
                    let d = b.scalars[sc] - mean_of_means;
                    d * d
                })
                .sum::<f64>()
                / ((nb - 1) as f64 * nb as f64);
            scalar_se[sc] = var.max(0.0).sqrt();
        }
    }

    Ok(EnsembleStats {
        series_mean,
        series_se,
        scalar_mean,
        scalar_se,
        count,
        divergent,
    })
}

/// Stepper holding the quantities that are constant along a path.
struct Stepper<'a> {
    sys: &'a StochasticSystem,
    u: &'a ControlSignal,
    dt: f64,
    sqrt_dt: f64,
    tamed: bool,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a StochasticSystem, u: &'a ControlSignal, grid: &SimGrid) -> Self {
        Self {
            sys,
            u,
            dt: grid.dt(),
            sqrt_dt: grid.dt().sqrt(),
            tamed: grid.tamed,
        }
    }

    /// Advance `x` from `t` to `t + dt` with normalized increments `xi`;
    /// returns `false` when the state explodes.
    fn step(&self, x: &mut DVector<f64>, t: f64, xi: &DVector<f64>) -> bool {
        let sys = self.sys;
        let uk = self.u.eval(t);
        let f_val = sys.f.eval(x);
        let mut drift = &f_val + &sys.b * &uk;
        for (i, gi) in sys.g.iter().enumerate() {
            if uk[i] != 0.0 && !gi.is_zero() {
                drift += gi.eval(x) * uk[i];
            }
        }
        if self.tamed {
            drift /= 1.0 + self.dt * f_val.norm();
        }
        let mut next = &*x + drift * self.dt;
        if sys.q > 0 {
            let dw = sys.k_sqrt() * xi * self.sqrt_dt;
            for (j, gj) in sys.gamma.iter().enumerate() {
                if dw[j] != 0.0 && !gj.is_zero() {
                    next += gj.eval(x) * dw[j];
                }
            }
            if !sys.m_is_zero() {
                for (j, mj) in sys.m_mats.iter().enumerate() {
                    if dw[j] != 0.0 {
                        next += (mj * &uk) * dw[j];
                    }
                }
            }
        }
        *x = next;
        let norm_sq = x.norm_squared();
        norm_sq.is_finite() && norm_sq <= EXPLOSION_THRESHOLD * EXPLOSION_THRESHOLD
    }

    fn output(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.sys.h.eval(x) + &self.sys.e * self.u.eval(t)
    }
}

fn draw_xi(rng: &mut ChaCha12Rng, q: usize) -> DVector<f64> {
    DVector::from_fn(q, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Trapezoid weight on a uniform grid.
#[inline]
fn trap_w(k: usize, steps: usize) -> f64 {
    if k == 0 || k == steps {
        0.5
    } else {
        1.0
    }
}

#[derive(Clone, Debug)]
pub struct RawTrajectories {
    pub n: usize,
    pub steps: usize,
    pub paths: usize,
    /// Row-major: path, then time index, then state component.
    pub data: Vec<f64>,
}

/// Ensemble simulation result: second-moment time series and L2_T output
/// statistics with batch standard errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    pub output_mean_sq: Vec<f64>,
    pub output_mean_sq_se: Vec<f64>,
    pub state_second_moment: Vec<f64>,
    pub state_second_moment_se: Vec<f64>,
    /// Estimate of `E int_0^T ||y||^2 dt` (trapezoid in time).
    pub l2t_norm_sq: f64,
    pub l2t_norm_sq_se: f64,
    pub paths: usize,
    pub divergent: usize,
    pub seed: u64,
    pub tamed: bool,
}

pub fn simulate(
    sys: &StochasticSystem,
    u: &ControlSignal,
    x0: &DVector<f64>,
    grid: &SimGrid,
) -> Result<SimulationResult> {
    if x0.len() != sys.n {
        return Err(Error::DimensionMismatch {
            context: "simulate".into(),
            expected: format!("x0 of length {}", sys.n),
            got: format!("{}", x0.len()),
        });
    }
    if u.channels != sys.m {
        return Err(Error::DimensionMismatch {
            context: "simulate".into(),
            expected: format!("{} control channels", sys.m),
            got: format!("{}", u.channels),
        });
    }
    let steps = grid.steps;
    let dt = grid.dt();
    let stepper = Stepper::new(sys, u, grid);

    let stats = run_ensemble(grid, 2, steps + 1, 1, |path, series, scalars| {
        let mut rng = path_rng(grid.seed, path);
        let mut x = x0.clone();
        let mut l2t = 0.0;
        let y0 = stepper.output(&x, grid.t0);
        series[0][0] = y0.norm_squared();
        series[1][0] = x.norm_squared();
        l2t += trap_w(0, steps) * series[0][0] * dt;
        for k in 0..steps {
            let t = grid.t0 + k as f64 * dt;
            let xi = draw_xi(&mut rng, sys.q);
            if !stepper.step(&mut x, t, &xi) {
                return false;
            }
            let y = stepper.output(&x, t + dt);
            series[0][k + 1] = y.norm_squared();
            series[1][k + 1] = x.norm_squared();
            l2t += trap_w(k + 1, steps) * series[0][k + 1] * dt;
        }
        scalars[0] = l2t;
        true
    })?;

    Ok(SimulationResult {
        times: grid.times(),
        output_mean_sq: stats.series_mean[0].clone(),
        output_mean_sq_se: stats.series_se[0].clone(),
        state_second_moment: stats.series_mean[1].clone(),
        state_second_moment_se: stats.series_se[1].clone(),
        l2t_norm_sq: stats.scalar_mean[0],
        l2t_norm_sq_se: stats.scalar_se[0],
        paths: grid.paths,
        divergent: stats.divergent,
        seed: grid.seed,
        tamed: grid.tamed,
    })
}

/// Retained per-path state trajectories (for the binary dump facility).
/// Sequential by construction; intended for small ensembles.
pub fn simulate_raw(
    sys: &StochasticSystem,
    u: &ControlSignal,
    x0: &DVector<f64>,
    grid: &SimGrid,
) -> Result<RawTrajectories> {
    grid.validate()?;
    let steps = grid.steps;
    let dt = grid.dt();
    let stepper = Stepper::new(sys, u, grid);
    let mut data = vec![0.0; grid.paths * (steps + 1) * sys.n];
    for path in 0..grid.paths {
        let mut rng = path_rng(grid.seed, path as u64);
        let mut x = x0.clone();
        let base = path * (steps + 1) * sys.n;
        data[base..base + sys.n].copy_from_slice(x.as_slice());
        for k in 0..steps {
            let t = grid.t0 + k as f64 * dt;
            let xi = draw_xi(&mut rng, sys.q);
            if !stepper.step(&mut x, t, &xi) {
                return Err(Error::SimulationFailure {
                    detail: format!("path {path} exploded at step {k}"),
                });
            }
            let off = base + (k + 1) * sys.n;
            data[off..off + sys.n].copy_from_slice(x.as_slice());
        }
    }
    Ok(RawTrajectories {
        n: sys.n,
        steps,
        paths: grid.paths,
        data,
    })
}

/// Paired (common-random-numbers) simulation result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedResult {
    pub times: Vec<f64>,
    pub diff_mean_sq: Vec<f64>,
    pub diff_mean_sq_se: Vec<f64>,
    /// Estimate of `E int ||y_A - y_B||^2 dt`.
    pub l2t_diff_sq: f64,
    pub l2t_diff_sq_se: f64,
    /// `sqrt` of the estimate, with delta-method standard error.
    pub mc_error: f64,
    pub mc_error_se: f64,
    pub paths: usize,
    pub divergent: usize,
}

/// Drive two systems with identical Wiener increments and control, and
/// estimate `E int ||y_A - y_B||^2 dt`. The systems must share the input,
/// output and noise spaces (including the covariance K).
pub fn simulate_coupled(
    sys_a: &StochasticSystem,
    sys_b: &StochasticSystem,
    u: &ControlSignal,
    x0_a: &DVector<f64>,
    x0_b: &DVector<f64>,
    grid: &SimGrid,
) -> Result<PairedResult> {
    if sys_a.m != sys_b.m || sys_a.p != sys_b.p || sys_a.q != sys_b.q {
        return Err(Error::DimensionMismatch {
            context: "simulate_coupled".into(),
            expected: format!("(m,p,q) = ({},{},{})", sys_a.m, sys_a.p, sys_a.q),
            got: format!("({},{},{})", sys_b.m, sys_b.p, sys_b.q),
        });
    }
    if (&sys_a.k - &sys_b.k).norm() > 1e-14 * (1.0 + sys_a.k.norm()) {
        return Err(Error::DimensionMismatch {
            context: "simulate_coupled".into(),
            expected: "identical noise covariance K".into(),
            got: "differing K".into(),
        });
    }
    if x0_a.len() != sys_a.n || x0_b.len() != sys_b.n {
        return Err(Error::DimensionMismatch {
            context: "simulate_coupled".into(),
            expected: format!("x0 lengths {} and {}", sys_a.n, sys_b.n),
            got: format!("{} and {}", x0_a.len(), x0_b.len()),
        });
    }
    let steps = grid.steps;
    let dt = grid.dt();
    let stepper_a = Stepper::new(sys_a, u, grid);
    let stepper_b = Stepper::new(sys_b, u, grid);

    let stats = run_ensemble(grid, 1, steps + 1, 1, |path, series, scalars| {
        let mut rng = path_rng(grid.seed, path);
        let mut xa = x0_a.clone();
        let mut xb = x0_b.clone();
        let mut l2t = 0.0;
        let d0 = (stepper_a.output(&xa, grid.t0) - stepper_b.output(&xb, grid.t0)).norm_squared();
        series[0][0] = d0;
        l2t += trap_w(0, steps) * d0 * dt;
        for k in 0..steps {
            let t = grid.t0 + k as f64 * dt;
            let xi = draw_xi(&mut rng, sys_a.q);
            let ok_a = stepper_a.step(&mut xa, t, &xi);
            let ok_b = stepper_b.step(&mut xb, t, &xi);
            if !ok_a || !ok_b {
                return false;
            }
            let d = (stepper_a.output(&xa, t + dt) - stepper_b.output(&xb, t + dt)).norm_squared();
            series[0][k + 1] = d;
            l2t += trap_w(k + 1, steps) * d * dt;
        }
        scalars[0] = l2t;
        true
    })?;

    let l2t_diff_sq = stats.scalar_mean[0];
    let l2t_diff_sq_se = stats.scalar_se[0];
    let mc_error = l2t_diff_sq.max(0.0).sqrt();
    let mc_error_se = if mc_error > 1e-150 {
        l2t_diff_sq_se / (2.0 * mc_error)
    } else {
        l2t_diff_sq_se.sqrt()
    };

    Ok(PairedResult {
        times: grid.times(),
        diff_mean_sq: stats.series_mean[0].clone(),
        diff_mean_sq_se: stats.series_se[0].clone(),
        l2t_diff_sq,
        l2t_diff_sq_se,
        mc_error,
        mc_error_se,
        paths: grid.paths,
        divergent: stats.divergent,
    })
}

/// Log-linear decay fit of the second moment, with an optional envelope
/// check against a certified rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted decay rate of `E||x(t)||^2` over the trailing half horizon.
    pub lambda_hat: f64,
    pub fit_residual: f64,
    pub decayed: bool,
    pub lambda_cert: Option<f64>,
    /// Envelope constant fitted on the early fifth of the grid.
    pub k_hat: Option<f64>,
    /// Grid points violating `m(t) <= k_hat ||x0||^2 e^{-lambda_cert t} + 4 SE`.
    pub envelope_violations: Option<usize>,
    pub result: SimulationResult,
}

/// Simulate `E||x(t)||^2` and fit its exponential decay rate on `[T/2, T]`.
/// Requires `B = 0` and `M = 0` (only multiplicative controls may act).
pub fn stability_probe(
    sys: &StochasticSystem,
    u: &ControlSignal,
    x0: &DVector<f64>,
    grid: &SimGrid,
    lambda_cert: Option<f64>,
) -> Result<DecayFit> {
    if !sys.b_is_zero() || !sys.m_is_zero() {
        return Err(Error::InvalidInput(
            "stability probe requires B = 0 and M = 0".into(),
        ));
    }
    let result = simulate(sys, u, x0, grid)?;
    let m = &result.state_second_moment;
    let times = &result.times;

    let max_m = m.iter().cloned().fold(0.0f64, f64::max);
    if max_m == 0.0 {
        // null trajectory: trivially decayed
        return Ok(DecayFit {
            lambda_hat: 0.0,
            fit_residual: 0.0,
            decayed: true,
            lambda_cert,
            k_hat: Some(0.0),
            envelope_violations: Some(0),
            result,
        });
    }

    let t_mid = grid.t0 + 0.5 * grid.horizon;
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(m.iter())
        .filter(|(t, v)| **t >= t_mid && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::SimulationFailure {
            detail: "non-positive second moments in the fit window".into(),
        });
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(t, _)| t).sum();
    let sy: f64 = pts.iter().map(|(_, v)| v).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| t * t).sum();
    let sxy: f64 = pts.iter().map(|(t, v)| t * v).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let fit_residual = (pts
        .iter()
        .map(|(t, v)| {
            let e = v - (slope * t + intercept);
            e * e
        })
        .sum::<f64>()
        / n)
        .sqrt();
    let lambda_hat = -slope;

    let (k_hat, envelope_violations) = match lambda_cert {
        None => (None, None),
        Some(lam) => {
            let x0_sq = x0.norm_squared();
            if x0_sq == 0.0 {
                let viol = m
                    .iter()
                    .zip(&result.state_second_moment_se)
                    .filter(|(v, se)| **v > 4.0 * **se)
                    .count();
                (Some(0.0), Some(viol))
            } else {
                let t_fit = grid.t0 + grid.horizon / 5.0;
                let mut k_hat = 0.0f64;
                for (t, v) in times.iter().zip(m.iter()) {
                    if *t <= t_fit {
                        k_hat = k_hat.max(v * (lam * (t - grid.t0)).exp() / x0_sq);
                    }
                }
                let viol = times
                    .iter()
                    .zip(m.iter().zip(&result.state_second_moment_se))
                    .filter(|(t, (v, se))| {
                        **v > k_hat * x0_sq * (-lam * (**t - grid.t0)).exp() + 4.0 * **se
                    })
                    .count();
                (Some(k_hat), Some(viol))
            }
        }
    };

    Ok(DecayFit {
        lambda_hat,
        fit_residual,
        decayed: lambda_hat > 0.0,
        lambda_cert,
        k_hat,
        envelope_violations,
        result,
    })
}

/// Per-direction energies `sup_t E <x(t), p_k>^2` from a zero initial state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionEnergy {
    pub times: Vec<f64>,
    pub series: Vec<Vec<f64>>,
    pub series_se: Vec<Vec<f64>>,
    pub sup_energy: Vec<f64>,
    pub sup_se: Vec<f64>,
    pub sup_time: Vec<f64>,
    pub state_second_moment: Vec<f64>,
    pub paths: usize,
    pub divergent: usize,
}

pub fn direction_energy(
    sys: &StochasticSystem,
    u: &ControlSignal,
    grid: &SimGrid,
    directions: &DMatrix<f64>,
) -> Result<DirectionEnergy> {
    if directions.nrows() != sys.n {
        return Err(Error::DimensionMismatch {
            context: "direction_energy".into(),
            expected: format!("{} rows", sys.n),
            got: format!("{}", directions.nrows()),
        });
    }
    let kdirs = directions.ncols();
    let gram = directions.transpose() * directions;
    let defect = (&gram - DMatrix::identity(kdirs, kdirs)).abs().max();
    if defect > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "directions not orthonormal (defect {:.3e})",
            defect
        )));
    }
    let steps = grid.steps;
    let dt = grid.dt();
    let stepper = Stepper::new(sys, u, grid);
    let x0 = DVector::zeros(sys.n);

    let stats = run_ensemble(grid, kdirs + 1, steps + 1, 0, |path, series, _| {
        let mut rng = path_rng(grid.seed, path);
        let mut x = x0.clone();
        for d in 0..kdirs {
            let proj = directions.column(d).dot(&x);
            series[d][0] = proj * proj;
        }
        series[kdirs][0] = x.norm_squared();
        for k in 0..steps {
            let t = grid.t0 + k as f64 * dt;
            let xi = draw_xi(&mut rng, sys.q);
            if !stepper.step(&mut x, t, &xi) {
                return false;
            }
            for d in 0..kdirs {
                let proj = directions.column(d).dot(&x);
                series[d][k + 1] = proj * proj;
            }
            series[kdirs][k + 1] = x.norm_squared();
        }
        true
    })?;

    let times = grid.times();
    let mut sup_energy = vec![0.0; kdirs];
    let mut sup_se = vec![0.0; kdirs];
    let mut sup_time = vec![grid.t0; kdirs];
    for d in 0..kdirs {
        for (k, &v) in stats.series_mean[d].iter().enumerate() {
            if v > sup_energy[d] {
                sup_energy[d] = v;
                sup_se[d] = stats.series_se[d][k];
                sup_time[d] = times[k];
            }
        }
    }

    Ok(DirectionEnergy {
        times,
        series: stats.series_mean[..kdirs].to_vec(),
        series_se: stats.series_se[..kdirs].to_vec(),
        sup_energy,
        sup_se,
        sup_time,
        state_second_moment: stats.series_mean[kdirs].clone(),
        paths: grid.paths,
        divergent: stats.divergent,
    })
}

/// Branch comparison for direction removal at an intermediate time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObsProbe {
    /// Estimate of `int_{t0}^T E||y - y_hat||^2 dt`.
    pub measured: f64,
    pub measured_se: f64,
    /// Estimate of `E <x(t0), q_k>^2`.
    pub proj_sq: f64,
    pub proj_sq_se: f64,
    /// `exp(int_{t0}^T ||u~||^2 / delta^2)`.
    pub exp_factor: f64,
    /// `mu_k * proj_sq * exp_factor`.
    pub bound: f64,
    pub bound_se: f64,
    pub branch_time: f64,
}

/// Simulate to `t_branch`, remove the `q_k`-component of the state in one
/// branch, and drive both branches with the same increments afterwards.
#[allow(clippy::too_many_arguments)]
pub fn observability_truncation_probe(
    sys: &StochasticSystem,
    u: &ControlSignal,
    grid: &SimGrid,
    q_k: &DVector<f64>,
    mu_k: f64,
    t_branch: f64,
    delta: f64,
) -> Result<ObsProbe> {
    if q_k.len() != sys.n {
        return Err(Error::DimensionMismatch {
            context: "observability probe".into(),
            expected: format!("direction of length {}", sys.n),
            got: format!("{}", q_k.len()),
        });
    }
    if (q_k.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput("q_k must be a unit vector".into()));
    }
    let t_end = grid.t0 + grid.horizon;
    if !(t_branch >= grid.t0 && t_branch < t_end) {
        return Err(Error::InvalidInput(format!(
            "branch time {t_branch} outside [{}, {})",
            grid.t0, t_end
        )));
    }
    let dt = grid.dt();
    let steps = grid.steps;
    let k0 = (((t_branch - grid.t0) / dt).round() as usize).min(steps - 1);
    let stepper = Stepper::new(sys, u, grid);
    let x0 = DVector::zeros(sys.n);

    let stats = run_ensemble(grid, 1, steps + 1, 2, |path, series, scalars| {
        let mut rng = path_rng(grid.seed, path);
        let mut xa = x0.clone();
        for k in 0..k0 {
            let t = grid.t0 + k as f64 * dt;
            let xi = draw_xi(&mut rng, sys.q);
            if !stepper.step(&mut xa, t, &xi) {
                return false;
            }
        }
        let proj = q_k.dot(&xa);
        scalars[1] = proj * proj;
        let mut xb = &xa - q_k * proj;
        let mut l2t = 0.0;
        let span = steps - k0;
        let d0 =
            (stepper.output(&xa, grid.t0 + k0 as f64 * dt) - stepper.output(&xb, grid.t0 + k0 as f64 * dt))
                .norm_squared();
        series[0][k0] = d0;
        l2t += trap_w(0, span) * d0 * dt;
        for k in k0..steps {
            let t = grid.t0 + k as f64 * dt;
            let xi = draw_xi(&mut rng, sys.q);
            let ok_a = stepper.step(&mut xa, t, &xi);
            let ok_b = stepper.step(&mut xb, t, &xi);
            if !ok_a || !ok_b {
                return false;
            }
            let d = (stepper.output(&xa, t + dt) - stepper.output(&xb, t + dt)).norm_squared();
            series[0][k + 1] = d;
            l2t += trap_w(k + 1 - k0, span) * d * dt;
        }
        scalars[0] = l2t;
        true
    })?;

    let tilde = multiplicative_control(sys, u)?;
    let tilde_to_end = tilde.weighted_l2t_sq(None, t_end - grid.t0, steps);
    let tilde_to_branch = tilde.weighted_l2t_sq(
        None,
        t_branch - grid.t0,
        ((t_branch - grid.t0) / dt).round() as usize,
    );
    let exp_factor = ((tilde_to_end - tilde_to_branch).max(0.0) / (delta * delta)).exp();

    let measured = stats.scalar_mean[0];
    let proj_sq = stats.scalar_mean[1];
    Ok(ObsProbe {
        measured,
        measured_se: stats.scalar_se[0],
        proj_sq,
        proj_sq_se: stats.scalar_se[1],
        exp_factor,
        bound: mu_k * proj_sq * exp_factor,
        bound_se: mu_k * stats.scalar_se[1] * exp_factor,
        branch_time: grid.t0 + k0 as f64 * dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::CoefficientField;

    fn mat1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_sdes(a: f64, gamma_lin: f64, k: f64) -> StochasticSystem {
        StochasticSystem::new(
            CoefficientField::affine(mat1(a)),
            DMatrix::zeros(1, 1),
            vec![CoefficientField::zero(1, 1)],
            vec![if gamma_lin == 0.0 {
                CoefficientField::zero(1, 1)
            } else {
                CoefficientField::affine(mat1(gamma_lin))
            }],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            mat1(k),
        )
        .unwrap()
    }

    #[test]
    fn zero_system_stays_put() {
        let sys = StochasticSystem::new(
            CoefficientField::zero(2, 2),
            DMatrix::zeros(2, 1),
            vec![CoefficientField::zero(2, 2)],
            vec![CoefficientField::zero(2, 2)],
            vec![DMatrix::zeros(2, 1)],
            CoefficientField::zero(2, 2),
            DMatrix::zeros(2, 1),
            mat1(1.0),
        )
        .unwrap();
        let u = ControlSignal::zero(1, 1.0);
        let x0 = DVector::from_vec(vec![0.7, -1.3]);
        let grid = SimGrid::new(1.0, 100, 8, 42).unwrap();
        let res = simulate(&sys, &u, &x0, &grid).unwrap();
        let expect = x0.norm_squared();
        for v in &res.state_second_moment {
            assert_eq!(*v, expect);
        }
        for v in &res.output_mean_sq {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn deterministic_ode_limit() {
        // dx = -x dt, no noise: x(1) = e^{-1} within O(dt)
        let sys = scalar_sdes(-1.0, 0.0, 0.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 1000, 1, 1).unwrap();
        let res = simulate(&sys, &u, &DVector::from_element(1, 1.0), &grid).unwrap();
        let x1 = res.state_second_moment.last().unwrap().sqrt();
        let dt = grid.dt();
        assert!(
            (x1 - (-1.0f64).exp()).abs() <= 5.0 * dt,
            "x(1) = {x1} vs {}",
            (-1.0f64).exp()
        );
    }

    #[test]
    fn geometric_noise_matches_moment_ode() {
        // dx = -x dt + x dw: d/dt E x^2 = (-2 + 1) E x^2, so E x(1)^2 = e^{-1}
        let sys = scalar_sdes(-1.0, 1.0, 1.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 1000, 10_000, 7).unwrap();
        let res = simulate(&sys, &u, &DVector::from_element(1, 1.0), &grid).unwrap();
        let est = *res.state_second_moment.last().unwrap();
        let se = *res.state_second_moment_se.last().unwrap();
        let truth = (-1.0f64).exp();
        assert!(
            (est - truth).abs() <= 4.0 * se + 5e-3,
            "est {est}, truth {truth}, se {se}"
        );
    }

    #[test]
    fn identical_systems_couple_to_zero() {
        let sys = scalar_sdes(-1.0, 0.5, 1.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 200, 64, 3).unwrap();
        let res = simulate_coupled(
            &sys,
            &sys,
            &u,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 1.0),
            &grid,
        )
        .unwrap();
        assert_eq!(res.l2t_diff_sq, 0.0);
        assert_eq!(res.mc_error, 0.0);
    }

    #[test]
    fn determinism_across_worker_counts() {
        let sys = scalar_sdes(-1.0, 0.7, 1.0);
        let u = ControlSignal::sinusoid(vec![1.0], vec![2.0], 1.0).unwrap();
        let grid = SimGrid::new(1.0, 100, 37, 123).unwrap();
        let x0 = DVector::from_element(1, 0.5);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let r1 = pool1.install(|| simulate(&sys, &u, &x0, &grid)).unwrap();
        let r8 = pool8.install(|| simulate(&sys, &u, &x0, &grid)).unwrap();
        assert_eq!(r1.l2t_norm_sq, r8.l2t_norm_sq);
        assert_eq!(r1.state_second_moment, r8.state_second_moment);
        assert_eq!(r1.output_mean_sq_se, r8.output_mean_sq_se);
    }

    #[test]
    fn increment_covariance_matches_k_dt() {
        // sample covariance of K^{1/2} xi sqrt(dt) draws vs K dt
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let sys = StochasticSystem::new(
            CoefficientField::zero(2, 2),
            DMatrix::zeros(2, 1),
            vec![CoefficientField::zero(2, 2)],
            vec![CoefficientField::zero(2, 2), CoefficientField::zero(2, 2)],
            vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)],
            CoefficientField::zero(2, 2),
            DMatrix::zeros(2, 1),
            k.clone(),
        )
        .unwrap();
        let dt: f64 = 0.01;
        let sqrt_dt = dt.sqrt();
        let n_draws = 100_000;
        let mut rng = path_rng(99, 0);
        let mut cov = DMatrix::zeros(2, 2);
        for _ in 0..n_draws {
            let xi = draw_xi(&mut rng, 2);
            let dw = sys.k_sqrt() * xi * sqrt_dt;
            cov += &dw * dw.transpose();
        }
        cov /= n_draws as f64;
        for i in 0..2 {
            for j in 0..2 {
                let se = ((k[(i, i)] * k[(j, j)] + k[(i, j)] * k[(i, j)]) / n_draws as f64)
                    .sqrt()
                    * dt;
                assert!(
                    (cov[(i, j)] - k[(i, j)] * dt).abs() <= 4.0 * se,
                    "cov[{i}{j}] = {} vs {}",
                    cov[(i, j)],
                    k[(i, j)] * dt
                );
            }
        }
    }

    #[test]
    fn explosion_aborts_ensemble() {
        // dx = +x^3 dt explodes quickly from x0 = 3 with dt too large
        let sys = StochasticSystem::new(
            CoefficientField::sum(vec![
                CoefficientField::cubic_drift(DMatrix::zeros(1, 1)),
                CoefficientField::affine(mat1(0.0)),
            ])
            .unwrap(),
            DMatrix::zeros(1, 1),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            mat1(0.0),
        )
        .unwrap();
        // cubic_drift(0) gives f(x) = -x^3 (stable); flip sign via composition
        let neg = DMatrix::from_element(1, 1, -1.0);
        let sys = StochasticSystem::new(
            sys.f.compose(&neg, &DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            mat1(0.0),
        )
        .unwrap();
        let u = ControlSignal::zero(1, 4.0);
        let grid = SimGrid::new(4.0, 40, 4, 5).unwrap();
        let err = simulate(&sys, &u, &DVector::from_element(1, 3.0), &grid).unwrap_err();
        assert!(matches!(err, Error::DivergentEnsemble { .. }), "{err}");
    }

    #[test]
    fn tamed_scheme_survives_stiff_start() {
        // dx = (-2x - x^3) dt from x0 = 10 at dt = 0.1: the plain scheme
        // overshoots and explodes, the tamed one contracts
        let sys = StochasticSystem::new(
            CoefficientField::cubic_drift(mat1(-2.0)),
            DMatrix::zeros(1, 1),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            mat1(0.0),
        )
        .unwrap();
        let u = ControlSignal::zero(1, 2.0);
        let x0 = DVector::from_element(1, 10.0);
        let plain = SimGrid::new(2.0, 20, 4, 41).unwrap();
        assert!(matches!(
            simulate(&sys, &u, &x0, &plain).unwrap_err(),
            Error::DivergentEnsemble { .. }
        ));
        let mut tamed = plain.clone();
        tamed.tamed = true;
        let res = simulate(&sys, &u, &x0, &tamed).unwrap();
        assert!(res.tamed);
        assert_eq!(res.divergent, 0);
        assert!(*res.state_second_moment.last().unwrap() < 1.0);
    }

    #[test]
    fn stability_probe_detects_growth() {
        let sys = scalar_sdes(1.0, 0.0, 0.0);
        let u = ControlSignal::zero(1, 2.0);
        let grid = SimGrid::new(2.0, 200, 4, 11).unwrap();
        let fit = stability_probe(&sys, &u, &DVector::from_element(1, 1.0), &grid, None).unwrap();
        assert!(!fit.decayed, "lambda_hat = {}", fit.lambda_hat);
    }

    #[test]
    fn stability_probe_zero_state() {
        let sys = scalar_sdes(-1.0, 0.5, 1.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 100, 16, 13).unwrap();
        let fit = stability_probe(&sys, &u, &DVector::zeros(1), &grid, Some(1.0)).unwrap();
        assert!(fit.decayed);
        assert_eq!(fit.envelope_violations, Some(0));
    }

    #[test]
    fn stability_probe_rejects_additive_input() {
        let sys = StochasticSystem::new(
            CoefficientField::affine(mat1(-1.0)),
            mat1(1.0),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            mat1(1.0),
        )
        .unwrap();
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 10, 2, 17).unwrap();
        assert!(stability_probe(&sys, &u, &DVector::zeros(1), &grid, None).is_err());
    }

    #[test]
    fn direction_energy_zero_without_forcing() {
        let sys = scalar_sdes(-1.0, 0.5, 1.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 50, 8, 19).unwrap();
        let de = direction_energy(&sys, &u, &grid, &DMatrix::identity(1, 1)).unwrap();
        assert!(de.sup_energy[0] == 0.0);
    }

    #[test]
    fn direction_energy_parseval() {
        // identity directions: sum of energies equals E||x||^2 per time
        let n = 3;
        let a = -DMatrix::<f64>::identity(n, n) * 2.0;
        let sys = StochasticSystem::new(
            CoefficientField::affine(a),
            DMatrix::from_element(n, 1, 1.0),
            vec![CoefficientField::zero(n, n)],
            vec![CoefficientField::sine(n)],
            vec![DMatrix::zeros(n, 1)],
            CoefficientField::affine(DMatrix::identity(n, n)),
            DMatrix::zeros(n, 1),
            mat1(1.0),
        )
        .unwrap();
        let u = ControlSignal::sinusoid(vec![1.0], vec![3.0], 1.0).unwrap();
        let grid = SimGrid::new(1.0, 100, 200, 23).unwrap();
        let de = direction_energy(&sys, &u, &grid, &DMatrix::identity(n, n)).unwrap();
        for k in 0..de.times.len() {
            let sum: f64 = (0..n).map(|d| de.series[d][k]).sum();
            let total = de.state_second_moment[k];
            assert!(
                (sum - total).abs() <= 1e-10 * (1.0 + total),
                "Parseval at index {k}: {sum} vs {total}"
            );
        }
    }

    #[test]
    fn direction_energy_rejects_skew_directions() {
        let sys = scalar_sdes(-1.0, 0.0, 1.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 10, 2, 29).unwrap();
        let bad = DMatrix::from_element(1, 1, 0.5);
        assert!(direction_energy(&sys, &u, &grid, &bad).is_err());
    }

    #[test]
    fn obs_probe_zero_projection_gives_zero_error() {
        // x0 = 0 and u = 0 before the branch keep x(t0) = 0 exactly
        let sys = scalar_sdes(-1.0, 0.5, 1.0);
        let u = ControlSignal::zero(1, 1.0);
        let grid = SimGrid::new(1.0, 100, 32, 31).unwrap();
        let probe = observability_truncation_probe(
            &sys,
            &u,
            &grid,
            &DVector::from_element(1, 1.0),
            0.5,
            0.5,
            1.0,
        )
        .unwrap();
        assert_eq!(probe.measured, 0.0);
        assert_eq!(probe.proj_sq, 0.0);
        assert_eq!(probe.bound, 0.0);
    }

    #[test]
    fn grid_refinement_changes_estimate_slowly() {
        // strong order 1/2 sanity: halving dt moves the estimate by O(dt^{1/2})
        let sys = scalar_sdes(-1.0, 0.8, 1.0);
        let u = ControlSignal::sinusoid(vec![1.0], vec![2.0], 1.0).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let coarse = SimGrid::new(1.0, 250, 2000, 37).unwrap();
        let fine = SimGrid::new(1.0, 500, 2000, 37).unwrap();
        let rc = simulate(&sys, &u, &x0, &coarse).unwrap();
        let rf = simulate(&sys, &u, &x0, &fine).unwrap();
        let diff = (rc.l2t_norm_sq - rf.l2t_norm_sq).abs();
        let c = diff / coarse.dt().sqrt();
        // record the constant loosely; the estimate must not jump wildly
        assert!(c.is_finite() && c < 10.0, "refinement constant {c}");
    }
}

