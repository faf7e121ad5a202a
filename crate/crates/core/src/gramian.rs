//! Gramian production.
//!
//! Catalog-linear systems get exact generalized-Lyapunov solutions; the
//! fully nonlinear route constructs `P = (eps_P X)^{-1}` and
//! `Q = X / eps_Q` from a one-sided Lipschitz certificate
//! `LV_X(x,y;delta) <= -lambda V_X(x-y)` and certifies the result.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::coeff::{is_diagonal, spd_sqrt_pair, spectral_norm, CoefficientField};
use crate::error::{Error, Result};
use crate::lyapunov::{
    certify_inequality, eval_lv, linear_lv_matrix, m_coupling_sum, CertifyReport, LvWeight,
    QuadraticCertificate, SamplingPlan, Which, CERTIFY_TOL,
};
use crate::system::{linearize_catalog, LinearSystemView, StochasticSystem};

/// Dense Kronecker vectorization works on n^2 unknowns; refuse beyond this.
pub const KRONECKER_SIZE_LIMIT: usize = 500;

/// Largest epsilon used when a constant degenerates to zero (h identically
/// zero, or no additive/multiplicative control coupling).
const EPS_CAP: f64 = 1e6;

/// Solve `A^T Y + Y A + sum_ij N_i^T Y N_j k_ij = -RHS` by vectorization:
/// `(I (x) A^T + A^T (x) I + sum_ij k_ij N_j^T (x) N_i^T) vec(Y) = -vec(RHS)`,
/// then symmetrize. The residual is checked against `1e-10 * ||RHS||_F`.
pub fn solve_generalized_lyapunov(
    a: &DMatrix<f64>,
    n_mats: &[DMatrix<f64>],
    k: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n > KRONECKER_SIZE_LIMIT {
        return Err(Error::SizeRefused {
            n,
            limit: KRONECKER_SIZE_LIMIT,
        });
    }
    if a.ncols() != n || rhs.nrows() != n || rhs.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_generalized_lyapunov".into(),
            expected: format!("{0}x{0} A and RHS", n),
            got: format!(
                "A {}x{}, RHS {}x{}",
                a.nrows(),
                a.ncols(),
                rhs.nrows(),
                rhs.ncols()
            ),
        });
    }
    let q = n_mats.len();
    if k.nrows() != q || k.ncols() != q {
        return Err(Error::DimensionMismatch {
            context: "solve_generalized_lyapunov".into(),
            expected: format!("{0}x{0} K", q),
            got: format!("{}x{}", k.nrows(), k.ncols()),
        });
    }

    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let mut op = eye.kronecker(&at) + at.kronecker(&eye);
    for i in 0..q {
        for j in 0..q {
            let kij = k[(i, j)];
            if kij != 0.0 {
                op += n_mats[j].transpose().kronecker(&n_mats[i].transpose()) * kij;
            }
        }
    }

    let rhs_vec = DVector::from_column_slice(rhs.as_slice());
    let lu = op.clone().lu();
    let sol = lu.solve(&(-&rhs_vec));
    let y = match sol {
        Some(v) => DMatrix::from_column_slice(n, n, v.as_slice()),
        None => {
            let sigma_min = op.svd(false, false).singular_values.min();
            return Err(Error::SingularLyapunovOperator { sigma_min });
        }
    };
    let y = (&y + y.transpose()) * 0.5;

    let residual = gen_lyapunov_residual(a, n_mats, k, &y, rhs);
    let rhs_norm = rhs.norm().max(f64::MIN_POSITIVE);
    if residual > 1e-10 * rhs_norm {
        let sigma_min = op.svd(false, false).singular_values.min();
        return Err(Error::SingularLyapunovOperator { sigma_min });
    }
    Ok(y)
}

/// `||A^T Y + Y A + sum N_i^T Y N_j k_ij + RHS||_F`.
pub fn gen_lyapunov_residual(
    a: &DMatrix<f64>,
    n_mats: &[DMatrix<f64>],
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> f64 {
    let mut res = a.transpose() * y + y * a + rhs;
    for i in 0..n_mats.len() {
        for j in 0..n_mats.len() {
            let kij = k[(i, j)];
            if kij != 0.0 {
                res += n_mats[i].transpose() * y * &n_mats[j] * kij;
            }
        }
    }
    res.norm()
}

/// Dual equation `A P + P A^T + sum_ij N_i P N_j^T k_ij = -RHS`,
/// obtained from the primal by transposing the coefficients.
pub fn solve_generalized_lyapunov_dual(
    a: &DMatrix<f64>,
    n_mats: &[DMatrix<f64>],
    k: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let at = a.transpose();
    let nt: Vec<DMatrix<f64>> = n_mats.iter().map(|m| m.transpose()).collect();
    solve_generalized_lyapunov(&at, &nt, k, rhs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMode {
    /// General pairs (x, y) — required by the output error bound.
    Full,
    /// y pinned at 0 — enough for dominance detection.
    Simplified,
}

/// Constants extracted for the epsilon construction. `lambda` is the
/// one-sided Lipschitz decay rate of (f, G, Gamma) in the X-norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzData {
    pub lambda: f64,
    pub c_gamma: f64,
    pub c_h: f64,
    pub c_b: f64,
    pub c_m: f64,
    pub c_min: f64,
    pub mu_max: f64,
    pub mode: LipschitzMode,
    /// "analytic" when every constant came from catalog algebra,
    /// "sampled" when everything was estimated, "mixed" otherwise.
    pub method: String,
    pub lambda_argmin: Option<(Vec<f64>, Vec<f64>)>,
}

/// Decompose the drift into its linear part plus counted component-wise
/// cube terms; `None` when a non-analytic kind appears.
fn drift_parts(field: &CoefficientField, n: usize) -> Option<(DMatrix<f64>, usize)> {
    match field {
        CoefficientField::CubicDrift { a } => Some((a.clone(), 1)),
        CoefficientField::Sum { members } => {
            let mut lin = DMatrix::zeros(n, n);
            let mut cubes = 0;
            for m in members {
                let (l, c) = drift_parts(m, n)?;
                lin += l;
                cubes += c;
            }
            Some((lin, cubes))
        }
        other => other.as_linear().map(|a| (a, 0)),
    }
}

/// Analytic one-sided Lipschitz rate from catalog structure, when the
/// chain applies: linear/cubic drift, linear or square multiplicative
/// columns, globally Lipschitz diffusion columns. Cube terms are only
/// negative under a diagonal weight, and each absorbs `delta^2 (x+y)^2`
/// worth of square columns.
fn analytic_lambda(sys: &StochasticSystem, cert: &QuadraticCertificate) -> Option<f64> {
    let n = sys.n;
    let x_mat = &cert.x;
    let diag_x = is_diagonal(x_mat);

    let (a_f, cubes) = drift_parts(&sys.f, n)?;
    if cubes > 0 && !diag_x {
        return None;
    }
    let mut z = a_f.transpose() * x_mat + x_mat * &a_f;

    let mut squares = 0usize;
    for gi in &sys.g {
        if gi.is_zero() {
            continue;
        }
        if let Some(ni) = gi.as_linear() {
            z += (ni.transpose() * x_mat * &ni) * (cert.delta * cert.delta);
        } else if matches!(gi, CoefficientField::Square { .. }) {
            squares += 1;
        } else {
            return None;
        }
    }
    if squares > 0 {
        // delta^2 * squares * (x+y)^2 must be dominated by the cube terms
        if !diag_x || (cert.delta * cert.delta) * squares as f64 > cubes as f64 {
            return None;
        }
    }

    // diffusion: exact matrix term when all columns are linear, otherwise
    // per-column Lipschitz constants folded through |k_ij|
    let all_linear_gamma = sys.gamma.iter().all(|g| g.as_linear().is_some());
    if sys.q > 0 {
        if all_linear_gamma {
            let n_mats: Vec<DMatrix<f64>> =
                sys.gamma.iter().map(|g| g.as_linear().unwrap()).collect();
            for i in 0..sys.q {
                for j in 0..sys.q {
                    let kij = sys.k[(i, j)];
                    if kij != 0.0 {
                        z += n_mats[i].transpose() * x_mat * &n_mats[j] * kij;
                    }
                }
            }
        } else {
            let consts: Option<Vec<f64>> = sys
                .gamma
                .iter()
                .map(|g| g.lipschitz_in_norm(x_mat))
                .collect();
            let consts = consts?;
            let mut coupling = 0.0;
            for i in 0..sys.q {
                for j in 0..sys.q {
                    coupling += sys.k[(i, j)].abs() * consts[i] * consts[j];
                }
            }
            z += x_mat * coupling;
        }
    }

    let z_sym = (&z + z.transpose()) * 0.5;
    let (_, inv_sqrt_x) = spd_sqrt_pair(x_mat);
    let scaled = &inv_sqrt_x * z_sym * &inv_sqrt_x;
    let lam_max = ((&scaled + scaled.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues
        .max();
    Some(-lam_max)
}

/// Plain-Euclidean output Lipschitz constant of h relative to the X-norm:
/// `||h(x)-h(y)|| <= c ||X^{1/2}(x-y)||`.
fn analytic_c_h(sys: &StochasticSystem, x_mat: &DMatrix<f64>) -> Option<f64> {
    let (_, inv_sqrt_x) = spd_sqrt_pair(x_mat);
    match &sys.h {
        h if h.is_zero() => Some(0.0),
        CoefficientField::Sine { .. } => Some(spectral_norm(&inv_sqrt_x)),
        other => other.as_linear().map(|c| spectral_norm(&(c * &inv_sqrt_x))),
    }
}

/// Estimate (or derive) the certificate constants of the epsilon route.
///
/// Sampled quantities are infima/suprema over the plan's pair list; catalog
/// fields with provable constants override the sampled value.
pub fn estimate_lipschitz_data(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    plan: &SamplingPlan,
    mode: LipschitzMode,
) -> Result<LipschitzData> {
    let x_mat = &cert.x;
    let weight = LvWeight::from_spd(x_mat.clone())?;
    let (sqrt_x, _) = spd_sqrt_pair(x_mat);

    let mut notes: Vec<&str> = Vec::new();

    // lambda
    let analytic = analytic_lambda(sys, cert);
    let mut lambda_argmin = None;
    let lambda = match analytic {
        Some(l) => {
            notes.push("analytic");
            l
        }
        None => {
            notes.push("sampled");
            let pairs = sampled_pairs(plan, sys.n, mode)?;
            let mut inf = f64::INFINITY;
            let mut argmin = None;
            for (x, y) in &pairs {
                let d = x - y;
                let v = (d.transpose() * x_mat * &d)[(0, 0)];
                if v <= 1e-14 {
                    continue;
                }
                let ratio = -eval_lv(sys, &weight, cert.delta, x, y)? / v;
                if ratio < inf {
                    inf = ratio;
                    argmin = Some((x.as_slice().to_vec(), y.as_slice().to_vec()));
                }
            }
            lambda_argmin = argmin;
            inf
        }
    };
    if !(lambda > 0.0) {
        return Err(Error::LipschitzFailure { lambda });
    }

    // c_gamma: sqrt of the sum of per-column constants when all are known
    let per_column: Option<Vec<f64>> = sys
        .gamma
        .iter()
        .map(|g| g.lipschitz_in_norm(x_mat))
        .collect();
    let c_gamma = match per_column {
        Some(cs) => {
            notes.push("analytic");
            cs.iter().map(|c| c * c).sum::<f64>().sqrt()
        }
        None => {
            notes.push("sampled");
            let pairs = sampled_pairs(plan, sys.n, mode)?;
            let mut sup = 0.0f64;
            for (x, y) in &pairs {
                let dnorm = (&sqrt_x * (x - y)).norm();
                if dnorm <= 1e-14 {
                    continue;
                }
                let dgamma = sys.eval_gamma(x) - sys.eval_gamma(y);
                sup = sup.max((&sqrt_x * dgamma).norm() / dnorm);
            }
            sup
        }
    };

    // c_h
    let c_h = match analytic_c_h(sys, x_mat) {
        Some(c) => {
            notes.push("analytic");
            c
        }
        None => {
            notes.push("sampled");
            let pairs = sampled_pairs(plan, sys.n, mode)?;
            let mut sup = 0.0f64;
            for (x, y) in &pairs {
                let dnorm = (&sqrt_x * (x - y)).norm();
                if dnorm <= 1e-14 {
                    continue;
                }
                sup = sup.max((sys.h.eval(x) - sys.h.eval(y)).norm() / dnorm);
            }
            sup
        }
    };

    let c_b = spectral_norm(&(&sqrt_x * &sys.b));

    let mut m_norm_k_sum = 0.0;
    for i in 0..sys.q {
        let mi_norm = spectral_norm(&(&sqrt_x * &sys.m_mats[i]));
        for j in 0..sys.q {
            m_norm_k_sum += mi_norm * sys.k[(i, j)].abs();
        }
    }
    let c_m = m_norm_k_sum * c_gamma;

    let c_min = cert.cal_u.clone().symmetric_eigen().eigenvalues.min();
    let coupling = m_coupling_sum(sys, x_mat);
    let coupling_eigs = ((&coupling + coupling.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues;
    if coupling_eigs.min() < -1e-10 {
        return Err(Error::InvalidInput(format!(
            "M-coupling sum not PSD (min eigenvalue {:.3e})",
            coupling_eigs.min()
        )));
    }
    let mu_max = coupling_eigs.max().max(0.0);

    let method = if notes.iter().all(|&s| s == "analytic") {
        "analytic"
    } else if notes.iter().all(|&s| s == "sampled") {
        "sampled"
    } else {
        "mixed"
    };

    Ok(LipschitzData {
        lambda,
        c_gamma,
        c_h,
        c_b,
        c_m,
        c_min,
        mu_max,
        mode,
        method: method.into(),
        lambda_argmin,
    })
}

fn sampled_pairs(
    plan: &SamplingPlan,
    n: usize,
    mode: LipschitzMode,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if plan.n_pairs == 0 {
        return Err(Error::EmptySamplingPlan);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(plan.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::with_capacity(plan.n_pairs);
    for i in 0..plan.n_pairs {
        let r = plan.radii[i % plan.radii.len().max(1)];
        let sample = |rng: &mut ChaCha12Rng| -> DVector<f64> {
            let mut v = DVector::from_fn(n, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let norm = v.norm();
            if norm > 0.0 {
                v *= r * rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64) / norm;
            }
            v
        };
        let x = sample(&mut rng);
        let y = match mode {
            LipschitzMode::Simplified => DVector::zeros(n),
            LipschitzMode::Full => sample(&mut rng),
        };
        out.push((x, y));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    LinearExact,
    EpsilonConstruction,
    UserSupplied,
}

/// A certified pair of Gramians ready for balancing.
#[derive(Clone, Debug)]
pub struct GramianPair {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub provenance: Provenance,
    pub cert: QuadraticCertificate,
    pub lipschitz: Option<LipschitzData>,
    pub eps_p: Option<f64>,
    pub eps_q: Option<f64>,
    pub reach_report: CertifyReport,
    pub obs_report: CertifyReport,
}

/// Epsilon construction: the largest closed-form epsilons consistent with
/// the certificate, halved on certification failure (at most 60 times).
pub fn epsilon_gramians(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    lip: &LipschitzData,
    plan: &SamplingPlan,
) -> Result<GramianPair> {
    if !(lip.lambda > 0.0) {
        return Err(Error::LipschitzFailure { lambda: lip.lambda });
    }
    let denom = 2.0 * (lip.c_b * lip.c_b + lip.c_m * lip.c_m) + lip.lambda * lip.mu_max;
    let eps_star = if denom > 0.0 {
        lip.lambda * lip.c_min / denom
    } else {
        EPS_CAP
    };
    let eps_u = if lip.mu_max > 0.0 {
        0.5 * lip.c_min / lip.mu_max
    } else {
        EPS_CAP
    };
    let mut eps_p = eps_star.min(eps_u).min(EPS_CAP);
    let mut eps_q = if lip.c_h > 0.0 {
        (lip.lambda / (lip.c_h * lip.c_h)).min(EPS_CAP)
    } else {
        EPS_CAP
    };

    let x_chol = Cholesky::new(cert.x.clone())
        .ok_or_else(|| Error::NotPositiveDefinite { name: "X".into() })?;
    let x_inv = x_chol.inverse();

    let mut reach_report = None;
    for halving in 0..=60u32 {
        let p = (&x_inv / eps_p + (&x_inv / eps_p).transpose()) * 0.5;
        let report = certify_inequality(sys, cert, &p, Which::Reach, plan, CERTIFY_TOL)?;
        if report.pass {
            reach_report = Some((p, report, eps_p));
            break;
        }
        if halving == 60 {
            return Err(Error::CertificationFailed {
                halvings: halving,
                residual: report.max_residual,
            });
        }
        eps_p *= 0.5;
    }
    let (p, reach_report, eps_p_final) = reach_report.unwrap();

    let mut obs_report = None;
    for halving in 0..=60u32 {
        let q = &cert.x / eps_q;
        let report = certify_inequality(sys, cert, &q, Which::Obs, plan, CERTIFY_TOL)?;
        if report.pass {
            obs_report = Some((q, report, eps_q));
            break;
        }
        if halving == 60 {
            return Err(Error::CertificationFailed {
                halvings: halving,
                residual: report.max_residual,
            });
        }
        eps_q *= 0.5;
    }
    let (q, obs_report, eps_q_final) = obs_report.unwrap();

    Ok(GramianPair {
        p,
        q,
        provenance: Provenance::EpsilonConstruction,
        cert: cert.clone(),
        lipschitz: Some(lip.clone()),
        eps_p: Some(eps_p_final),
        eps_q: Some(eps_q_final),
        reach_report,
        obs_report,
    })
}

/// Exact Gramians for a catalog-linear system.
///
/// Q solves the generalized Lyapunov equation with RHS `C^T C` (the
/// inequality then holds with equality). With `M = 0` the reachability
/// candidate comes from the dual equation with RHS `B U^{-1} B^T`, scaled by
/// the smallest factor that satisfies the matrix inequality exactly; with
/// `M != 0` (or without additive input) the epsilon route is used instead.
pub fn linear_gramians(
    view: &LinearSystemView,
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    plan: &SamplingPlan,
) -> Result<GramianPair> {
    let q_sol = solve_generalized_lyapunov(
        &view.a,
        &view.n_mats,
        &sys.k,
        &(view.c.transpose() * &view.c),
    )?;
    if Cholesky::new(q_sol.clone()).is_none() {
        return Err(Error::Unstable {
            detail: "observability solution is not positive definite".into(),
        });
    }

    let obs_report = certify_inequality(sys, cert, &q_sol, Which::Obs, plan, CERTIFY_TOL)?;
    if !obs_report.pass {
        return Err(Error::CertificationFailed {
            halvings: 0,
            residual: obs_report.max_residual,
        });
    }

    // reachability candidate from the dual equation, when the structure
    // admits one; otherwise (M != 0, B = 0, or an indefinite inequality
    // form) fall back to the epsilon construction for P
    let direct = if sys.m_is_zero() && !sys.b_is_zero() {
        scaled_equality_reachability(view, sys, cert, plan)?
    } else {
        None
    };

    match direct {
        Some((p, reach_report)) => Ok(GramianPair {
            p,
            q: q_sol,
            provenance: Provenance::LinearExact,
            cert: cert.clone(),
            lipschitz: None,
            eps_p: None,
            eps_q: None,
            reach_report,
            obs_report,
        }),
        None => {
            let lip = estimate_lipschitz_data(sys, cert, plan, LipschitzMode::Full)?;
            let eps = epsilon_gramians(sys, cert, &lip, plan)?;
            Ok(GramianPair {
                p: eps.p,
                q: q_sol,
                provenance: Provenance::LinearExact,
                cert: cert.clone(),
                lipschitz: eps.lipschitz,
                eps_p: eps.eps_p,
                eps_q: None,
                reach_report: eps.reach_report,
                obs_report,
            })
        }
    }
}

/// Solve the dual equation and scale the solution into validity.
///
/// For `P' = c * P_eq`, with `L = A^T P^-1 + P^-1 A + sum N_i^T P^-1 N_j k_ij`
/// and the S-term matrix `T = P^-1 B U^-1 B^T P^-1` (both at `P_eq`), the
/// residual quadratic form scales as `(1/c) L + (1/c^2) T`, so validity means
/// `c L + T <= 0`. Scaling DOWN cannot achieve that once `T != 0` (the limit
/// is `T >= 0`); the minimal valid factor is the largest generalized
/// eigenvalue of `T v = c (-L) v`. In the stochastic case `L` can be
/// indefinite, in which case no scalar multiple works and `None` is returned.
fn scaled_equality_reachability(
    view: &LinearSystemView,
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    plan: &SamplingPlan,
) -> Result<Option<(DMatrix<f64>, CertifyReport)>> {
    let u_inv = Cholesky::new(cert.cal_u.clone())
        .ok_or_else(|| Error::NotPositiveDefinite { name: "calU".into() })?
        .inverse();
    let rhs = &sys.b * &u_inv * sys.b.transpose();
    let p_eq = solve_generalized_lyapunov_dual(&view.a, &view.n_mats, &sys.k, &rhs)?;
    let p_chol = match Cholesky::new(p_eq.clone()) {
        Some(c) => c,
        // unreachable directions make the equality solution singular; the
        // epsilon construction still yields a strict Gramian
        None => return Ok(None),
    };
    let p_inv = p_chol.inverse();
    let p_inv = (&p_inv + p_inv.transpose()) * 0.5;
    let l_mat = linear_lv_matrix(view, &p_inv, &sys.k);
    let w = &p_inv * &sys.b;
    let t_mat = &w * &u_inv * w.transpose();

    let c_star = match min_valid_scale(&l_mat, &t_mat) {
        Ok(c) => c,
        Err(_) => return Ok(None),
    };
    let scale = c_star * (1.0 + 1e-9) + 1e-300;
    let p = &p_eq * scale;
    let reach_report = certify_inequality(sys, cert, &p, Which::Reach, plan, CERTIFY_TOL)?;
    if reach_report.pass {
        Ok(Some((p, reach_report)))
    } else {
        Ok(None)
    }
}

/// Smallest `c > 0` with `c * L + T <= 0`, where `T` is PSD and `-L` is
/// expected PSD. Solved through the pseudo-inverse square root of `-L`;
/// an indefinite `-L` beyond roundoff is unstable.
fn min_valid_scale(l_mat: &DMatrix<f64>, t_mat: &DMatrix<f64>) -> Result<f64> {
    let neg_l = -(l_mat + l_mat.transpose()) * 0.5;
    let eig = neg_l.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.max();
    if lam_max <= 0.0 {
        return Err(Error::Unstable {
            detail: "linear reachability form is not dissipative".into(),
        });
    }
    if eig.eigenvalues.min() < -1e-10 * lam_max {
        return Err(Error::Unstable {
            detail: format!(
                "linear reachability form indefinite (min eig {:.3e})",
                eig.eigenvalues.min()
            ),
        });
    }
    let n = neg_l.nrows();
    let mut pinv_sqrt = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = eig.eigenvalues[i];
        if lam > 1e-13 * lam_max {
            let v = eig.eigenvectors.column(i);
            pinv_sqrt += v * v.transpose() / lam.sqrt();
        }
    }
    let pencil = &pinv_sqrt * t_mat * &pinv_sqrt;
    let c_star = ((&pencil + pencil.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues
        .max()
        .max(0.0);
    Ok(c_star)
}

/// Route a system to the appropriate Gramian construction.
pub fn compute_gramians(
    sys: &StochasticSystem,
    cert: &QuadraticCertificate,
    plan: &SamplingPlan,
) -> Result<GramianPair> {
    match linearize_catalog(sys) {
        Some(view) => linear_gramians(&view, sys, cert, plan),
        None => {
            let lip = estimate_lipschitz_data(sys, cert, plan, LipschitzMode::Full)?;
            epsilon_gramians(sys, cert, &lip, plan)
        }
    }
}
