//! The Lyapunov-type operator and the Gramian inequality residuals.
//!
//! For a positive semidefinite weight `X`,
//!
//! ```text
//! LV_X(x, y; d) = 2<x-y, X(f(x)-f(y))>
//!               + d^2 ||X^{1/2}(G(x)-G(y))||_F^2
//!               + ||X^{1/2}(Gamma(x)-Gamma(y)) K^{1/2}||_F^2,
//! ```
//!
//! together with `U_X = U - sum_ij M_i^T X M_j k_ij` and
//! `S_X(x,y) = B^T X (x-y) + sum_ij M_i^T X (gamma_j(x)-gamma_j(y)) k_ij`.
//! A reachability Gramian P makes `LV_{P^-1} + S^T U^-1 S <= 0` everywhere;
//! an observability Gramian Q makes `LV_Q + ||h(x)-h(y)||^2 <= 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{linearize_catalog, StochasticSystem};

/// Default absolute tolerance on certification residuals. Residuals are
/// quadratic in ||x-y|| up to radius ~100, so 1e-9 absolute at sampled
/// scales corresponds to ~1e-13 relative.
pub const CERTIFY_TOL: f64 = 1e-9;

/// Certificate data: the weight X, the G-term parameter delta and the free
/// parameter U shaping the control-energy norm.
#[derive(Clone, Debug)]
pub struct QuadraticCertificate {
    pub x: DMatrix<f64>,
    pub delta: f64,
    pub cal_u: DMatrix<f64>,
}

impl QuadraticCertificate {
    pub fn new(x: DMatrix<f64>, delta: f64, cal_u: DMatrix<f64>) -> Result<Self> {
        if delta <= 0.0 {
            return Err(Error::InvalidInput("delta must be positive".into()));
        }
        if Cholesky::new(x.clone()).is_none() {
            return Err(Error::NotPositiveDefinite { name: "X".into() });
        }
        if Cholesky::new(cal_u.clone()).is_none() {
            return Err(Error::NotPositiveDefinite { name: "calU".into() });
        }
        Ok(Self { x, delta, cal_u })
    }

    pub fn identity(n: usize, m: usize, delta: f64) -> Self {
        Self {
            x: DMatrix::identity(n, n),
            delta,
            cal_u: DMatrix::identity(m, m),
        }
    }
}

/// Cached weight for LV evaluation: the matrix X together with a factor F
/// satisfying `F F^T = X`, so `||X^{1/2} Z||_F = ||F^T Z||_F`.
#[derive(Clone, Debug)]
pub struct LvWeight {
    pub x: DMatrix<f64>,
    factor_t: DMatrix<f64>,
}

impl LvWeight {
    /// From an SPD matrix via its lower Cholesky factor.
    pub fn from_spd(x: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(x.clone())
            .ok_or_else(|| Error::NotPositiveDefinite { name: "X".into() })?;
        let factor_t = chol.l().transpose();
        Ok(Self { x, factor_t })
    }

    /// Weight `P^{-1}` from SPD `P` without forming a second factorization:
    /// with `P = L L^T`, `P^{-1} = L^{-T} L^{-1}` and `F = L^{-T}`.
    pub fn from_inverse_of(p: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(p.clone())
            .ok_or_else(|| Error::NotPositiveDefinite { name: "P".into() })?;
        let n = p.nrows();
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::NotPositiveDefinite { name: "P".into() })?;
        let x = l_inv.transpose() * &l_inv;
        let x = (&x + x.transpose()) * 0.5;
        Ok(Self {
            x,
            factor_t: l_inv,
        })
    }

    /// From a PSD matrix via symmetric square root (used for semidefinite Q).
    pub fn from_psd(x: DMatrix<f64>) -> Result<Self> {
        let sym = (&x + x.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        if eig.eigenvalues.min() < -1e-12 {
            return Err(Error::NotPositiveDefinite { name: "X (PSD)".into() });
        }
        let mut root = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..eig.eigenvalues.len() {
            let lam = eig.eigenvalues[i].max(0.0);
            let v = eig.eigenvectors.column(i);
            root += v * v.transpose() * lam.sqrt();
        }
        Ok(Self {
            x: sym,
            factor_t: root,
        })
    }

    #[inline]
    pub fn weighted_frob_sq(&self, z: &DMatrix<f64>) -> f64 {
        (&self.factor_t * z).norm_squared()
    }
}

/// `LV_X(x, y; delta)` via the factored identity of the quadratic form.
pub fn eval_lv(
    sys: &StochasticSystem,
    weight: &LvWeight,
    delta: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if x.len() != sys.n || y.len() != sys.n || weight.x.nrows() != sys.n {
        return Err(Error::DimensionMismatch {
            context: "eval_lv".into(),
            expected: format!("n = {}", sys.n),
            got: format!("x: {}, y: {}, X: {}", x.len(), y.len(), weight.x.nrows()),
        });
    }
    let diff = x - y;
    let df = sys.f.eval(x) - sys.f.eval(y);
    let mut total = 2.0 * diff.dot(&(&weight.x * df));

    let any_g = sys.g.iter().any(|gi| !gi.is_zero());
    if any_g {
        let dg = sys.eval_g(x) - sys.eval_g(y);
        total += delta * delta * weight.weighted_frob_sq(&dg);
    }
    let any_gamma = sys.gamma.iter().any(|gj| !gj.is_zero());
    if any_gamma && sys.q > 0 {
        let dgamma = (sys.eval_gamma(x) - sys.eval_gamma(y)) * sys.k_sqrt();
        total += weight.weighted_frob_sq(&dgamma);
    }
    Ok(total)
}

/// Convenience entry evaluating `LV` with the certificate's own weight X.
pub fn eval_lv_cert(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let weight = LvWeight::from_spd(cert.x.clone())?;
    eval_lv(sys, &weight, cert.delta, x, y)
}

/// `U_X = calU - sum_ij M_i^T X_arg M_j k_ij`, symmetrized.
pub fn eval_u(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    x_arg: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x_arg.nrows() != sys.n || x_arg.ncols() != sys.n {
        return Err(Error::DimensionMismatch {
            context: "eval_u".into(),
            expected: format!("{0}x{0}", sys.n),
            got: format!("{}x{}", x_arg.nrows(), x_arg.ncols()),
        });
    }
    let mut u = cert.cal_u.clone();
    u -= m_coupling_sum(sys, x_arg);
    Ok((&u + u.transpose()) * 0.5)
}

/// `sum_ij M_i^T X M_j k_ij` (PSD for PSD X and K).
pub fn m_coupling_sum(sys: &StochasticSystem, x_arg: &DMatrix<f64>) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(sys.m, sys.m);
    if sys.m_is_zero() {
        return acc;
    }
    for i in 0..sys.q {
        for j in 0..sys.q {
            let kij = sys.k[(i, j)];
            if kij != 0.0 {
                acc += sys.m_mats[i].transpose() * x_arg * &sys.m_mats[j] * kij;
            }
        }
    }
    acc
}

/// `S_X(x,y) = B^T X (x-y) + sum_ij M_i^T X (gamma_j(x)-gamma_j(y)) k_ij`.
pub fn eval_s(
    sys: &StochasticSystem,
    x_arg: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != sys.n || y.len() != sys.n || x_arg.nrows() != sys.n {
        return Err(Error::DimensionMismatch {
            context: "eval_s".into(),
            expected: format!("n = {}", sys.n),
            got: format!("x: {}, y: {}, X: {}", x.len(), y.len(), x_arg.nrows()),
        });
    }
    let diff = x - y;
    let mut s = sys.b.transpose() * (x_arg * diff);
    if !sys.m_is_zero() {
        let dgam: Vec<DVector<f64>> = sys
            .gamma
            .iter()
            .map(|gj| gj.eval(x) - gj.eval(y))
            .collect();
        for i in 0..sys.q {
            for j in 0..sys.q {
                let kij = sys.k[(i, j)];
                if kij != 0.0 {
                    s += sys.m_mats[i].transpose() * (x_arg * &dgam[j]) * kij;
                }
            }
        }
    }
    Ok(s)
}

/// Prepared reachability-residual evaluator for a fixed candidate P.
pub struct ReachResidual<'a> {
    sys: &'a StochasticSystem,
    delta: f64,
    weight: LvWeight,
    u_inv: Cholesky<f64, Dyn>,
}

impl<'a> ReachResidual<'a> {
    pub fn new(
        sys: &'a StochasticSystem,
        cert: &QuadraticCertificate,
        p: &DMatrix<f64>,
    ) -> Result<Self> {
        let weight = LvWeight::from_inverse_of(p)?;
        let u = eval_u(sys, cert, &weight.x)?;
        let u_inv = Cholesky::new(u.clone()).ok_or_else(|| Error::FreeParameterTooSmall {
            min_eig: u.symmetric_eigen().eigenvalues.min(),
        })?;
        Ok(Self {
            sys,
            delta: cert.delta,
            weight,
            u_inv,
        })
    }

    /// `LV_{P^-1}(x,y) + S^T U^-1 S`; nonpositive everywhere for a Gramian.
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let lv = eval_lv(self.sys, &self.weight, self.delta, x, y)?;
        let s = eval_s(self.sys, &self.weight.x, x, y)?;
        Ok(lv + s.dot(&self.u_inv.solve(&s)))
    }
}

/// One-shot reachability residual (see [`ReachResidual`] for batch use).
pub fn reachability_residual(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    p: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    ReachResidual::new(sys, cert, p)?.eval(x, y)
}

/// Prepared observability-residual evaluator for a fixed candidate Q.
pub struct ObsResidual<'a> {
    sys: &'a StochasticSystem,
    delta: f64,
    weight: LvWeight,
}

impl<'a> ObsResidual<'a> {
    pub fn new(
        sys: &'a StochasticSystem,
        cert: &QuadraticCertificate,
        q: &DMatrix<f64>,
    ) -> Result<Self> {
        Ok(Self {
            sys,
            delta: cert.delta,
            weight: LvWeight::from_psd(q.clone())?,
        })
    }

    /// `LV_Q(x,y) + ||h(x)-h(y)||^2`; nonpositive everywhere for a Gramian.
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let lv = eval_lv(self.sys, &self.weight, self.delta, x, y)?;
        let dh = self.sys.h.eval(x) - self.sys.h.eval(y);
        Ok(lv + dh.norm_squared())
    }
}

pub fn observability_residual(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    q: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    ObsResidual::new(sys, cert, q)?.eval(x, y)
}

/// Which Gramian inequality to certify; the simplified variants pin y = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Reach,
    Obs,
    ReachSimplified,
    ObsSimplified,
}

impl Which {
    fn simplified(self) -> bool {
        matches!(self, Which::ReachSimplified | Which::ObsSimplified)
    }
}

/// Structured sampling protocol for the "for all x, y" inequalities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub n_pairs: usize,
    pub radii: Vec<f64>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(n_pairs: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            radii: vec![0.1, 1.0, 10.0, 100.0],
            seed,
        }
    }

    /// Deterministic pair list, generated before any parallel fan-out so the
    /// verdict is independent of worker count.
    fn pairs(&self, n: usize, simplified: bool) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
        if self.n_pairs == 0 {
            return Err(Error::EmptySamplingPlan);
        }
        if self.radii.is_empty() {
            return Err(Error::InvalidInput("sampling plan has no radii".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.n_pairs);
        let ball = |rng: &mut ChaCha12Rng, r: f64| -> DVector<f64> {
            let mut v = DVector::from_fn(n, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let norm = v.norm();
            if norm > 0.0 {
                let scale = r * rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64) / norm;
                v *= scale;
            }
            v
        };
        for i in 0..self.n_pairs {
            let r = self.radii[i % self.radii.len()];
            let (x, y) = match i % 8 {
                // uniform ball pairs at the cycling radius
                0..=3 => (ball(&mut rng, r), ball(&mut rng, r)),
                // coordinate axes
                4 => {
                    let j = rng.gen_range(0..n);
                    let mut x = DVector::zeros(n);
                    x[j] = r;
                    (x, DVector::zeros(n))
                }
                5 => {
                    let j = rng.gen_range(0..n);
                    let mut x = DVector::zeros(n);
                    x[j] = r;
                    (x.clone(), -x)
                }
                // +- symmetric pair
                6 => {
                    let x = ball(&mut rng, r);
                    let y = -x.clone();
                    (x, y)
                }
                // pair against the origin
                _ => (ball(&mut rng, r), DVector::zeros(n)),
            };
            let y = if simplified { DVector::zeros(n) } else { y };
            out.push((x, y));
        }
        Ok(out)
    }
}

/// Outcome of a certification run, serializable for the report files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertifyReport {
    pub which: Which,
    pub n_samples: usize,
    pub max_residual: f64,
    pub argmax_pair: (Vec<f64>, Vec<f64>),
    pub pass: bool,
    /// "sampled" or "exact-linear"; records the verification protocol.
    pub method: String,
    pub tolerance: f64,
}

/// Certify a candidate Gramian against its defining inequality.
///
/// Catalog-linear systems are certified exactly through the eigenvalues of
/// the matrix form of the inequality; everything else is certified on the
/// sampled pair list of `plan` at tolerance `tol` (absolute).
pub fn certify_inequality(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    candidate: &DMatrix<f64>,
    which: Which,
    plan: &SamplingPlan,
    tol: f64,
) -> Result<CertifyReport> {
    if let Some(view) = linearize_catalog(sys) {
        return certify_linear_exact(sys, cert, candidate, which, &view, tol);
    }
    let pairs = plan.pairs(sys.n, which.simplified())?;
    let worst = match which {
        Which::Reach | Which::ReachSimplified => {
            let eva = ReachResidual::new(sys, cert, candidate)?;
            max_residual_over(&pairs, |x, y| eva.eval(x, y))?
        }
        Which::Obs | Which::ObsSimplified => {
            let eva = ObsResidual::new(sys, cert, candidate)?;
            max_residual_over(&pairs, |x, y| eva.eval(x, y))?
        }
    };
    let (max_residual, idx) = worst;
    let (ax, ay) = &pairs[idx];
    Ok(CertifyReport {
        which,
        n_samples: pairs.len(),
        max_residual,
        argmax_pair: (ax.as_slice().to_vec(), ay.as_slice().to_vec()),
        pass: max_residual <= tol,
        method: "sampled".into(),
        tolerance: tol,
    })
}

fn max_residual_over<F>(
    pairs: &[(DVector<f64>, DVector<f64>)],
    f: F,
) -> Result<(f64, usize)>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<f64> + Sync,
{
    let evals: Result<Vec<f64>> = pairs.par_iter().map(|(x, y)| f(x, y)).collect();
    let evals = evals?;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &v) in evals.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// Exact certification for the linear case: the residual is a quadratic form
/// `d^T R d` in `d = x - y`, so the verdict is the largest eigenvalue of R.
fn certify_linear_exact(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    candidate: &DMatrix<f64>,
    which: Which,
    view: &crate::system::LinearSystemView,
    tol: f64,
) -> Result<CertifyReport> {
    let r_mat = match which {
        Which::Reach | Which::ReachSimplified => {
            let weight = LvWeight::from_inverse_of(candidate)?;
            let u = eval_u(sys, cert, &weight.x)?;
            let u_chol = Cholesky::new(u.clone()).ok_or_else(|| Error::FreeParameterTooSmall {
                min_eig: u.symmetric_eigen().eigenvalues.min(),
            })?;
            let lv_mat = linear_lv_matrix(view, &weight.x, &sys.k);
            // S(x,y) = W^T d with W^T = B^T X + sum_ij M_i^T X N_j k_ij
            let w_t = linear_s_matrix(sys, view, &weight.x);
            let s_term = w_t.transpose() * u_chol.solve(&w_t);
            lv_mat + s_term
        }
        Which::Obs | Which::ObsSimplified => {
            let q = (candidate + candidate.transpose()) * 0.5;
            let lv_mat = linear_lv_matrix(view, &q, &sys.k);
            lv_mat + view.c.transpose() * &view.c
        }
    };
    let r_sym = (&r_mat + r_mat.transpose()) * 0.5;
    let eig = r_sym.clone().symmetric_eigen();
    let mut max_residual = f64::NEG_INFINITY;
    let mut argmax = DVector::zeros(sys.n);
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > max_residual {
            max_residual = eig.eigenvalues[i];
            argmax = eig.eigenvectors.column(i).into_owned();
        }
    }
    Ok(CertifyReport {
        which,
        n_samples: 0,
        max_residual,
        argmax_pair: (argmax.as_slice().to_vec(), vec![0.0; sys.n]),
        pass: max_residual <= tol,
        method: "exact-linear".into(),
        tolerance: tol,
    })
}

/// `A^T X + X A + sum_ij N_i^T X N_j k_ij` — the matrix of `LV_X` for a
/// catalog-linear system.
pub fn linear_lv_matrix(
    view: &crate::system::LinearSystemView,
    x_arg: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = view.a.transpose() * x_arg + x_arg * &view.a;
    for i in 0..view.n_mats.len() {
        for j in 0..view.n_mats.len() {
            let kij = k[(i, j)];
            if kij != 0.0 {
                out += view.n_mats[i].transpose() * x_arg * &view.n_mats[j] * kij;
            }
        }
    }
    (&out + out.transpose()) * 0.5
}

/// `W^T` with `S_X(x,y) = W^T (x-y)` in the linear case:
/// `W^T = B^T X + sum_ij M_i^T X N_j k_ij`.
pub fn linear_s_matrix(
    sys: &StochasticSystem,
    view: &crate::system::LinearSystemView,
    x_arg: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut w_t = sys.b.transpose() * x_arg;
    if !sys.m_is_zero() {
        for i in 0..sys.q {
            for j in 0..sys.q {
                let kij = sys.k[(i, j)];
                if kij != 0.0 {
                    w_t += sys.m_mats[i].transpose() * x_arg * &view.n_mats[j] * kij;
                }
            }
        }
    }
    w_t
}
