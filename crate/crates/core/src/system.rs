//! The controlled nonlinear stochastic system
//!
//! ```text
//! dx = [f(x) + B u + G(x) u] dt + [Gamma(x) + M(u)] dw,
//!  y = h(x) + E u,
//! ```
//!
//! with `G(x) = [g_1(x) .. g_m(x)]`, `Gamma(x) = [gamma_1(x) .. gamma_q(x)]`,
//! `M(u) = [M_1 u .. M_q u]` and a Wiener process of covariance `K`.
//! All types here are immutable after construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coeff::CoefficientField;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct StochasticSystem {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub f: CoefficientField,
    pub b: DMatrix<f64>,
    pub g: Vec<CoefficientField>,
    pub gamma: Vec<CoefficientField>,
    pub m_mats: Vec<DMatrix<f64>>,
    pub h: CoefficientField,
    pub e: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Symmetric PSD root with `k_sqrt * k_sqrt^T = K`, computed once.
    k_sqrt: DMatrix<f64>,
}

/// Eigenvalues this far below zero are treated as roundoff in K.
const K_EIG_TOL: f64 = 1e-12;

impl StochasticSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f: CoefficientField,
        b: DMatrix<f64>,
        g: Vec<CoefficientField>,
        gamma: Vec<CoefficientField>,
        m_mats: Vec<DMatrix<f64>>,
        h: CoefficientField,
        e: DMatrix<f64>,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        let (n_in, n_out) = f.dims();
        if n_in != n_out {
            return Err(Error::DimensionMismatch {
                context: "drift f".into(),
                expected: "square field n->n".into(),
                got: format!("{}->{}", n_in, n_out),
            });
        }
        let n = n_in;
        let m = b.ncols();
        let q = k.nrows();
        let (h_in, p) = h.dims();

        let dim_err = |context: &str, expected: String, got: String| Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        };
        if b.nrows() != n {
            return Err(dim_err("B", format!("{}x{}", n, m), format!("{}x{}", b.nrows(), b.ncols())));
        }
        if h_in != n {
            return Err(dim_err("h", format!("{}->p", n), format!("{}->{}", h_in, p)));
        }
        if e.nrows() != p || e.ncols() != m {
            return Err(dim_err("E", format!("{}x{}", p, m), format!("{}x{}", e.nrows(), e.ncols())));
        }
        if k.ncols() != q {
            return Err(dim_err("K", "square qxq".into(), format!("{}x{}", k.nrows(), k.ncols())));
        }
        if g.len() != m {
            return Err(dim_err("G", format!("{} columns", m), format!("{}", g.len())));
        }
        if gamma.len() != q {
            return Err(dim_err("Gamma", format!("{} columns", q), format!("{}", gamma.len())));
        }
        if m_mats.len() != q {
            return Err(dim_err("M", format!("{} matrices", q), format!("{}", m_mats.len())));
        }
        for (i, gi) in g.iter().enumerate() {
            if gi.dims() != (n, n) {
                return Err(dim_err(&format!("g_{}", i + 1), format!("{0}->{0}", n), format!("{:?}", gi.dims())));
            }
        }
        for (j, gj) in gamma.iter().enumerate() {
            if gj.dims() != (n, n) {
                return Err(dim_err(&format!("gamma_{}", j + 1), format!("{0}->{0}", n), format!("{:?}", gj.dims())));
            }
        }
        for (j, mj) in m_mats.iter().enumerate() {
            if mj.nrows() != n || mj.ncols() != m {
                return Err(dim_err(&format!("M_{}", j + 1), format!("{}x{}", n, m), format!("{}x{}", mj.nrows(), mj.ncols())));
            }
        }

        let k_sqrt = psd_sqrt(&k)?;
        Ok(Self {
            n,
            m,
            p,
            q,
            f,
            b,
            g,
            gamma,
            m_mats,
            h,
            e,
            k,
            k_sqrt,
        })
    }

    pub fn k_sqrt(&self) -> &DMatrix<f64> {
        &self.k_sqrt
    }

    /// `G(x)` assembled as an `n x m` matrix.
    pub fn eval_g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.m);
        for (i, gi) in self.g.iter().enumerate() {
            if !gi.is_zero() {
                out.set_column(i, &gi.eval(x));
            }
        }
        out
    }

    /// `Gamma(x)` assembled as an `n x q` matrix.
    pub fn eval_gamma(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.q);
        for (j, gj) in self.gamma.iter().enumerate() {
            if !gj.is_zero() {
                out.set_column(j, &gj.eval(x));
            }
        }
        out
    }

    /// `M(u) = [M_1 u .. M_q u]` as an `n x q` matrix.
    pub fn eval_m(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.q);
        for (j, mj) in self.m_mats.iter().enumerate() {
            out.set_column(j, &(mj * u));
        }
        out
    }

    pub fn m_is_zero(&self) -> bool {
        self.m_mats.iter().all(|mj| mj.iter().all(|&v| v == 0.0))
    }

    pub fn b_is_zero(&self) -> bool {
        self.b.iter().all(|&v| v == 0.0)
    }

    /// Channel mask: index i is multiplicative iff `g_i` is not identically zero.
    pub fn multiplicative_mask(&self) -> Vec<bool> {
        self.g.iter().map(|gi| !gi.is_zero()).collect()
    }

    /// Point symmetry of the state coefficients f, G, Gamma (h excluded).
    /// Exact verdict for catalog kinds; sampled (200 points, 1e-10) otherwise.
    pub fn point_symmetry(&self) -> SymmetryCertificate {
        let mut sampled_any = false;
        let mut fields: Vec<(String, &CoefficientField)> = vec![("f".into(), &self.f)];
        for (i, g) in self.g.iter().enumerate() {
            fields.push((format!("g_{}", i + 1), g));
        }
        for (j, g) in self.gamma.iter().enumerate() {
            fields.push((format!("gamma_{}", j + 1), g));
        }
        for (name, field) in fields {
            match field.point_symmetric_exact() {
                Some(true) => {}
                Some(false) => return SymmetryCertificate::NotSymmetric { offending: name },
                None => {
                    sampled_any = true;
                    if let Some(defect) = sample_symmetry_defect(field) {
                        return SymmetryCertificate::NotSymmetric {
                            offending: format!("{} (sampled defect {:.3e})", name, defect),
                        };
                    }
                }
            }
        }
        if sampled_any {
            SymmetryCertificate::Sampled
        } else {
            SymmetryCertificate::ExactCatalog
        }
    }
}

/// 200-point sampling check; returns the defect when it exceeds 1e-10.
fn sample_symmetry_defect(field: &CoefficientField) -> Option<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x5f3759df);
    let (dim, _) = field.dims();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-10.0..10.0));
        let defect = (field.eval(&(-x.clone())) + field.eval(&x)).norm();
        worst = worst.max(defect);
    }
    if worst > 1e-10 {
        Some(worst)
    } else {
        None
    }
}

/// How point symmetry of (f, G, Gamma) was established.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SymmetryCertificate {
    /// Decided exactly from catalog kinds.
    ExactCatalog,
    /// Extension fields present; verified by 200-point sampling only.
    Sampled,
    NotSymmetric { offending: String },
}

impl SymmetryCertificate {
    pub fn holds(&self) -> bool {
        !matches!(self, SymmetryCertificate::NotSymmetric { .. })
    }
}

/// Symmetric PSD square root with negative eigenvalues above `-1e-12`
/// clamped to zero; anything lower is rejected.
fn psd_sqrt(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (k + k.transpose()) * 0.5;
    if (k - &sym).norm() > 1e-12 * (1.0 + k.norm()) {
        return Err(Error::InvalidInput("K must be symmetric".into()));
    }
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -K_EIG_TOL {
        return Err(Error::CovarianceNotPsd { min_eig });
    }
    let mut root = DMatrix::zeros(k.nrows(), k.ncols());
    for i in 0..eig.eigenvalues.len() {
        let lam = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i);
        root += v * v.transpose() * lam.sqrt();
    }
    Ok(root)
}

/// Deterministic control signal on a finite horizon.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlKind {
    Zero,
    /// Uniform grid over `[0, horizon)`; value of channel i on step k is
    /// `values[i][k]`. Zero outside the horizon.
    PiecewiseConstant { values: Vec<Vec<f64>> },
    /// `u_i(t) = amplitudes[i] * sin(frequencies[i] * t)`.
    Sinusoid {
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
    },
    /// `u_i(t) = amplitudes[i] * exp(-rates[i] * t)`.
    ExponentialDecay { amplitudes: Vec<f64>, rates: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlSignal {
    #[serde(flatten)]
    pub kind: ControlKind,
    pub channels: usize,
    pub horizon: f64,
}

impl ControlSignal {
    pub fn zero(channels: usize, horizon: f64) -> Self {
        Self {
            kind: ControlKind::Zero,
            channels,
            horizon,
        }
    }

    pub fn sinusoid(amplitudes: Vec<f64>, frequencies: Vec<f64>, horizon: f64) -> Result<Self> {
        if amplitudes.len() != frequencies.len() {
            return Err(Error::DimensionMismatch {
                context: "sinusoid control".into(),
                expected: format!("{} frequencies", amplitudes.len()),
                got: format!("{}", frequencies.len()),
            });
        }
        Ok(Self {
            channels: amplitudes.len(),
            kind: ControlKind::Sinusoid {
                amplitudes,
                frequencies,
            },
            horizon,
        })
    }

    pub fn exponential_decay(amplitudes: Vec<f64>, rates: Vec<f64>, horizon: f64) -> Result<Self> {
        if amplitudes.len() != rates.len() {
            return Err(Error::DimensionMismatch {
                context: "exponential-decay control".into(),
                expected: format!("{} rates", amplitudes.len()),
                got: format!("{}", rates.len()),
            });
        }
        Ok(Self {
            channels: amplitudes.len(),
            kind: ControlKind::ExponentialDecay { amplitudes, rates },
            horizon,
        })
    }

    pub fn piecewise_constant(values: Vec<Vec<f64>>, horizon: f64) -> Result<Self> {
        let steps = values.first().map(|r| r.len()).unwrap_or(0);
        if values.is_empty() || steps == 0 {
            return Err(Error::InvalidInput(
                "piecewise-constant control needs at least one channel and one step".into(),
            ));
        }
        if values.iter().any(|r| r.len() != steps) {
            return Err(Error::InvalidInput(
                "piecewise-constant channels must share the step count".into(),
            ));
        }
        Ok(Self {
            channels: values.len(),
            kind: ControlKind::PiecewiseConstant { values },
            horizon,
        })
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match &self.kind {
            ControlKind::Zero => DVector::zeros(self.channels),
            ControlKind::PiecewiseConstant { values } => {
                let steps = values[0].len();
                // clamped at the right endpoint so grid quadrature sees the
                // last piece; zero strictly outside the horizon
                if t < 0.0 || t > self.horizon || self.horizon <= 0.0 {
                    return DVector::zeros(self.channels);
                }
                let idx = ((t / self.horizon) * steps as f64).floor() as usize;
                let idx = idx.min(steps - 1);
                DVector::from_fn(self.channels, |i, _| values[i][idx])
            }
            ControlKind::Sinusoid {
                amplitudes,
                frequencies,
            } => DVector::from_fn(self.channels, |i, _| {
                amplitudes[i] * (frequencies[i] * t).sin()
            }),
            ControlKind::ExponentialDecay { amplitudes, rates } => {
                DVector::from_fn(self.channels, |i, _| amplitudes[i] * (-rates[i] * t).exp())
            }
        }
    }

    /// `int_0^T u(t)^T W u(t) dt` with `W = I` when `weight` is `None`.
    ///
    /// Closed form for zero/sinusoid/exponential kinds; trapezoid on the
    /// `steps`-point simulation grid for piecewise signals, so bound inputs
    /// match the discretization they are compared against.
    pub fn weighted_l2t_sq(&self, weight: Option<&DMatrix<f64>>, t_end: f64, steps: usize) -> f64 {
        let w_entry = |i: usize, j: usize| -> f64 {
            match weight {
                Some(w) => w[(i, j)],
                None => {
                    if i == j {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        };
        match &self.kind {
            ControlKind::Zero => 0.0,
            ControlKind::Sinusoid {
                amplitudes,
                frequencies,
            } => {
                let mut total = 0.0;
                for i in 0..self.channels {
                    for j in 0..self.channels {
                        let wij = w_entry(i, j);
                        if wij == 0.0 {
                            continue;
                        }
                        total += wij
                            * amplitudes[i]
                            * amplitudes[j]
                            * sin_product_integral(frequencies[i], frequencies[j], t_end);
                    }
                }
                total
            }
            ControlKind::ExponentialDecay { amplitudes, rates } => {
                let mut total = 0.0;
                for i in 0..self.channels {
                    for j in 0..self.channels {
                        let wij = w_entry(i, j);
                        if wij == 0.0 {
                            continue;
                        }
                        let rho = rates[i] + rates[j];
                        let integral = if rho.abs() < 1e-300 {
                            t_end
                        } else {
                            (1.0 - (-rho * t_end).exp()) / rho
                        };
                        total += wij * amplitudes[i] * amplitudes[j] * integral;
                    }
                }
                total
            }
            ControlKind::PiecewiseConstant { .. } => {
                let steps = steps.max(1);
                let dt = t_end / steps as f64;
                let mut total = 0.0;
                for k in 0..=steps {
                    let t = k as f64 * dt;
                    let u = self.eval(t);
                    let quad = match weight {
                        Some(w) => (u.transpose() * w * &u)[(0, 0)],
                        None => u.norm_squared(),
                    };
                    let coeff = if k == 0 || k == steps { 0.5 } else { 1.0 };
                    total += coeff * quad * dt;
                }
                total
            }
        }
    }

    /// Zeroes channel i; the signal kind is preserved.
    fn mask_channels(&self, keep: &[bool]) -> Self {
        let masked = |vals: &[f64]| -> Vec<f64> {
            vals.iter()
                .zip(keep)
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect()
        };
        let kind = match &self.kind {
            ControlKind::Zero => ControlKind::Zero,
            ControlKind::PiecewiseConstant { values } => ControlKind::PiecewiseConstant {
                values: values
                    .iter()
                    .zip(keep)
                    .map(|(row, &k)| {
                        if k {
                            row.clone()
                        } else {
                            vec![0.0; row.len()]
                        }
                    })
                    .collect(),
            },
            ControlKind::Sinusoid {
                amplitudes,
                frequencies,
            } => ControlKind::Sinusoid {
                amplitudes: masked(amplitudes),
                frequencies: frequencies.clone(),
            },
            ControlKind::ExponentialDecay { amplitudes, rates } => ControlKind::ExponentialDecay {
                amplitudes: masked(amplitudes),
                rates: rates.clone(),
            },
        };
        Self {
            kind,
            channels: self.channels,
            horizon: self.horizon,
        }
    }
}

/// `int sin(a t) sin(b t) dt` over `[0, T]`, closed form:
/// `(sinc(a-b) - sinc(a+b)) / 2` with `sinc(c) = sin(c T)/c`, `sinc(0) = T`.
fn sin_product_integral(a: f64, b: f64, t_end: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    let sinc = |c: f64| -> f64 {
        if c.abs() < 1e-14 * (1.0 + a.abs() + b.abs()) {
            t_end
        } else {
            (c * t_end).sin() / c
        }
    };
    0.5 * (sinc(a - b) - sinc(a + b))
}

/// The controls entering the multiplicative drift part: channel i is zeroed
/// iff `g_i` is identically zero.
pub fn multiplicative_control(sys: &StochasticSystem, u: &ControlSignal) -> Result<ControlSignal> {
    if u.channels != sys.m {
        return Err(Error::DimensionMismatch {
            context: "multiplicative_control".into(),
            expected: format!("{} channels", sys.m),
            got: format!("{}", u.channels),
        });
    }
    Ok(u.mask_channels(&sys.multiplicative_mask()))
}

/// Matrices of a catalog-linear system: `f(x)=Ax`, `gamma_j(x)=N_j x`,
/// `h(x)=Cx`, all `g_i` identically zero.
#[derive(Clone, Debug)]
pub struct LinearSystemView {
    pub a: DMatrix<f64>,
    pub n_mats: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
}

/// Returns the matrix view when every coefficient is catalog-linear and the
/// drift carries no multiplicative part; no numerical linearization is done.
pub fn linearize_catalog(sys: &StochasticSystem) -> Option<LinearSystemView> {
    if !sys.g.iter().all(|gi| gi.is_zero()) {
        return None;
    }
    let a = sys.f.as_linear()?;
    let c = sys.h.as_linear()?;
    let mut n_mats = Vec::with_capacity(sys.q);
    for gj in &sys.gamma {
        n_mats.push(gj.as_linear()?);
    }
    Some(LinearSystemView { a, n_mats, c })
}

/// Outcome of one structural check on a system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub point_symmetry: SymmetryCertificate,
    pub all_passed: bool,
}

/// Structural validation: dimensions, zero-at-origin for every coefficient,
/// PSD covariance and the point-symmetry verdict for f, G, Gamma.
pub fn validate_system(sys: &StochasticSystem) -> ValidationReport {
    let mut checks = Vec::new();

    // dimensions were enforced at construction; record the fact
    checks.push(CheckResult {
        name: "dimensions".into(),
        passed: true,
        detail: format!("n={}, m={}, p={}, q={}", sys.n, sys.m, sys.p, sys.q),
    });

    let zero = DVector::zeros(sys.n);
    let mut origin_fields: Vec<(String, &CoefficientField)> = vec![("f".into(), &sys.f)];
    for (i, gi) in sys.g.iter().enumerate() {
        origin_fields.push((format!("g_{}", i + 1), gi));
    }
    for (j, gj) in sys.gamma.iter().enumerate() {
        origin_fields.push((format!("gamma_{}", j + 1), gj));
    }
    origin_fields.push(("h".into(), &sys.h));
    for (name, field) in origin_fields {
        let norm = field.eval(&zero).norm();
        checks.push(CheckResult {
            name: format!("origin:{}", name),
            passed: norm <= 1e-14,
            detail: format!("|F(0)| = {:.3e}", norm),
        });
    }

    let min_eig = if sys.q == 0 {
        0.0
    } else {
        ((&sys.k + sys.k.transpose()) * 0.5).symmetric_eigen().eigenvalues.min()
    };
    checks.push(CheckResult {
        name: "K-psd".into(),
        passed: min_eig >= -K_EIG_TOL,
        detail: format!("smallest eigenvalue {:.3e}", min_eig),
    });

    // hard failures only; point symmetry is recorded, not enforced (it
    // gates the error bound, nothing else)
    let all_passed = checks.iter().all(|c| c.passed);

    let point_symmetry = sys.point_symmetry();
    checks.push(CheckResult {
        name: "point-symmetry(f,G,Gamma)".into(),
        passed: point_symmetry.holds(),
        detail: format!("{:?}", point_symmetry),
    });

    ValidationReport {
        checks,
        point_symmetry,
        all_passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;

    fn scalar_system(a: f64, b: f64, n_gamma: f64, m1: f64, k: f64) -> StochasticSystem {
        StochasticSystem::new(
            CoefficientField::affine(DMatrix::from_element(1, 1, a)),
            DMatrix::from_element(1, 1, b),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::affine(DMatrix::from_element(1, 1, n_gamma))],
            vec![DMatrix::from_element(1, 1, m1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, k),
        )
        .unwrap()
    }

    #[test]
    fn example_5_3_small_passes_validation() {
        // n=2, A=-2I, G = [x -> x], Gamma = sine, h = identity
        let a = DMatrix::from_diagonal_element(2, 2, -2.0);
        let sys = StochasticSystem::new(
            CoefficientField::cubic_drift(a),
            DMatrix::from_element(2, 1, 1.0),
            vec![CoefficientField::affine(DMatrix::identity(2, 2))],
            vec![CoefficientField::sine(2)],
            vec![DMatrix::zeros(2, 1)],
            CoefficientField::affine(DMatrix::identity(2, 2)),
            DMatrix::zeros(2, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let report = validate_system(&sys);
        assert!(report.all_passed, "{:#?}", report.checks);
        assert_eq!(report.point_symmetry, SymmetryCertificate::ExactCatalog);
    }

    #[test]
    fn shifted_drift_violates_origin() {
        struct Shifted;
        impl crate::coeff::VectorField for Shifted {
            fn dims(&self) -> (usize, usize) {
                (2, 2)
            }
            fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0] + 1.0, x[1]])
            }
        }
        let sys = StochasticSystem::new(
            CoefficientField::custom("shifted", std::sync::Arc::new(Shifted)),
            DMatrix::zeros(2, 1),
            vec![CoefficientField::zero(2, 2)],
            vec![CoefficientField::zero(2, 2)],
            vec![DMatrix::zeros(2, 1)],
            CoefficientField::affine(DMatrix::identity(2, 2)),
            DMatrix::zeros(2, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let report = validate_system(&sys);
        assert!(!report.all_passed);
        let origin = report
            .checks
            .iter()
            .find(|c| c.name == "origin:f")
            .unwrap();
        assert!(!origin.passed);
    }

    #[test]
    fn indefinite_k_rejected() {
        // eigenvalues of [[1,2],[2,1]] are {3, -1}
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = StochasticSystem::new(
            CoefficientField::affine(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::zeros(1, 1),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::zero(1, 1), CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            k,
        )
        .unwrap_err();
        match err {
            Error::CovarianceNotPsd { min_eig } => assert!((min_eig + 1.0).abs() < 1e-10),
            other => panic!("expected PSD error, got {other}"),
        }
    }

    #[test]
    fn multiplicative_mask_zeroes_additive_channels() {
        // m=2: g_1 nonzero, g_2 identically zero
        let sys = StochasticSystem::new(
            CoefficientField::affine(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            vec![
                CoefficientField::affine(DMatrix::identity(1, 1)),
                CoefficientField::zero(1, 1),
            ],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 2)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let u = ControlSignal::sinusoid(vec![1.0, 2.0], vec![1.0, 1.0], 1.0).unwrap();
        let tilde = multiplicative_control(&sys, &u).unwrap();
        let at = tilde.eval(0.7);
        let orig = u.eval(0.7);
        assert_eq!(at[0], orig[0]);
        assert_eq!(at[1], 0.0);
        // idempotent
        let twice = multiplicative_control(&sys, &tilde).unwrap();
        assert_eq!(twice.eval(0.7), at);
    }

    #[test]
    fn multiplicative_control_rejects_channel_mismatch() {
        let sys = scalar_system(-1.0, 1.0, 0.0, 0.0, 1.0);
        let u = ControlSignal::sinusoid(vec![1.0, 2.0], vec![1.0, 1.0], 1.0).unwrap();
        assert!(matches!(
            multiplicative_control(&sys, &u),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn all_zero_g_masks_everything() {
        let sys = scalar_system(-1.0, 1.0, 0.0, 0.0, 1.0);
        let u = ControlSignal::sinusoid(vec![2.0], vec![3.0], 1.0).unwrap();
        let tilde = multiplicative_control(&sys, &u).unwrap();
        assert_eq!(tilde.eval(0.3)[0], 0.0);
    }

    #[test]
    fn all_nonzero_g_passes_through() {
        let sys = StochasticSystem::new(
            CoefficientField::affine(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::from_element(1, 1, 1.0),
            vec![CoefficientField::affine(DMatrix::identity(1, 1))],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::affine(DMatrix::identity(1, 1)),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let u = ControlSignal::sinusoid(vec![2.0], vec![3.0], 1.0).unwrap();
        let tilde = multiplicative_control(&sys, &u).unwrap();
        assert_eq!(tilde.eval(0.3), u.eval(0.3));
    }

    #[test]
    fn linearize_catalog_returns_matrices() {
        let sys = scalar_system(-1.0, 1.0, 0.5, 0.0, 1.0);
        let view = linearize_catalog(&sys).unwrap();
        assert_eq!(view.a[(0, 0)], -1.0);
        assert_eq!(view.n_mats[0][(0, 0)], 0.5);
        assert_eq!(view.c[(0, 0)], 1.0);
    }

    #[test]
    fn linearize_catalog_rejects_nonlinear_kinds() {
        let ex = builtins::example1(2);
        assert!(linearize_catalog(&ex.system).is_none());

        // nonlinear output map
        let sys = StochasticSystem::new(
            CoefficientField::affine(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::from_element(1, 1, 1.0),
            vec![CoefficientField::zero(1, 1)],
            vec![CoefficientField::zero(1, 1)],
            vec![DMatrix::zeros(1, 1)],
            CoefficientField::sine(1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(linearize_catalog(&sys).is_none());
    }

    #[test]
    fn sinusoid_energy_closed_form_matches_quadrature() {
        // includes a mirrored frequency pair so the a = -b branch is hit
        // through the cross terms of a non-diagonal weight
        let u = ControlSignal::sinusoid(vec![1.3, 0.7], vec![2.0, -2.0], 2.0).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let closed = u.weighted_l2t_sq(Some(&w), 2.0, 0);
        // fine trapezoid oracle
        let steps = 200_000;
        let dt = 2.0 / steps as f64;
        let mut trap = 0.0;
        for k in 0..=steps {
            let t = k as f64 * dt;
            let uv = u.eval(t);
            let v = (uv.transpose() * &w * &uv)[(0, 0)];
            trap += if k == 0 || k == steps { 0.5 * v } else { v } * dt;
        }
        assert!(
            (closed - trap).abs() < 1e-8,
            "closed {closed} vs trap {trap}"
        );
        assert!(closed.is_finite());
    }

    #[test]
    fn piecewise_control_indexes_steps() {
        let u = ControlSignal::piecewise_constant(vec![vec![1.0, 2.0, 3.0]], 3.0).unwrap();
        assert_eq!(u.eval(0.5)[0], 1.0);
        assert_eq!(u.eval(1.5)[0], 2.0);
        assert_eq!(u.eval(2.99)[0], 3.0);
        assert_eq!(u.eval(3.01)[0], 0.0);
    }
}
