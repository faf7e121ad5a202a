//! Coefficient fields: the closed catalog of nonlinearities plus an
//! extension hook for programmatic users.
//!
//! Every field maps `R^in_dim -> R^out_dim`, vanishes at the origin and is
//! side-effect free, so simulation workers may evaluate the same field
//! concurrently. Catalog members carry decidable point-symmetry flags;
//! custom fields only get a sampled verdict.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Extension interface for user-supplied vector fields.
///
/// Implementors must guarantee `eval(0) = 0` and deterministic evaluation.
pub trait VectorField: Send + Sync {
    fn dims(&self) -> (usize, usize);
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Claimed point symmetry, if the author can vouch for it.
    fn point_symmetric_hint(&self) -> Option<bool> {
        None
    }
}

/// A coefficient field of the system: drift, diffusion columns or output map.
#[derive(Clone)]
pub enum CoefficientField {
    /// `x -> A x`. Also covers the per-column linear kind `x -> N_j x`.
    Affine { a: DMatrix<f64> },
    /// `x -> A x - x.^3` (component-wise cube).
    CubicDrift { a: DMatrix<f64> },
    /// Component-wise sine, `x -> sin(x)`. 1-Lipschitz and odd.
    Sine { dim: usize },
    /// Component-wise square, `x -> x.^2`. Not point symmetric.
    Square { dim: usize },
    /// Identically zero field.
    Zero { in_dim: usize, out_dim: usize },
    /// Sum of member fields with matching dimensions.
    Sum { members: Vec<CoefficientField> },
    /// `x -> L * F(R * x)`: conjugation triple used by balancing/truncation.
    Composed {
        left: DMatrix<f64>,
        inner: Box<CoefficientField>,
        right: DMatrix<f64>,
    },
    /// Extension-interface field; not serializable, symmetry only sampled.
    Custom {
        name: String,
        field: Arc<dyn VectorField>,
    },
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (i, o) = self.dims();
        write!(f, "{}({i}->{o})", self.kind_name())
    }
}

impl CoefficientField {
    pub fn affine(a: DMatrix<f64>) -> Self {
        Self::Affine { a }
    }

    pub fn cubic_drift(a: DMatrix<f64>) -> Self {
        Self::CubicDrift { a }
    }

    pub fn sine(dim: usize) -> Self {
        Self::Sine { dim }
    }

    pub fn square(dim: usize) -> Self {
        Self::Square { dim }
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self::Zero { in_dim, out_dim }
    }

    pub fn sum(members: Vec<CoefficientField>) -> Result<Self> {
        let mut dims = None;
        for m in &members {
            match dims {
                None => dims = Some(m.dims()),
                Some(d) if d != m.dims() => {
                    return Err(Error::DimensionMismatch {
                        context: "composite-sum members".into(),
                        expected: format!("{:?}", d),
                        got: format!("{:?}", m.dims()),
                    })
                }
                _ => {}
            }
        }
        if members.is_empty() {
            return Err(Error::InvalidInput("composite-sum needs members".into()));
        }
        Ok(Self::Sum { members })
    }

    pub fn custom(name: impl Into<String>, field: Arc<dyn VectorField>) -> Self {
        Self::Custom {
            name: name.into(),
            field,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Affine { .. } => "affine",
            Self::CubicDrift { .. } => "cubic-drift",
            Self::Sine { .. } => "sine",
            Self::Square { .. } => "square",
            Self::Zero { .. } => "zero",
            Self::Sum { .. } => "sum",
            Self::Composed { .. } => "composed",
            Self::Custom { .. } => "custom",
        }
    }

    /// (input dimension, output dimension)
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Affine { a } | Self::CubicDrift { a } => (a.ncols(), a.nrows()),
            Self::Sine { dim } | Self::Square { dim } => (*dim, *dim),
            Self::Zero { in_dim, out_dim } => (*in_dim, *out_dim),
            Self::Sum { members } => members[0].dims(),
            Self::Composed { left, right, .. } => (right.ncols(), left.nrows()),
            Self::Custom { field, .. } => field.dims(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.dims().0);
        match self {
            Self::Affine { a } => a * x,
            Self::CubicDrift { a } => {
                let mut out = a * x;
                for i in 0..x.len() {
                    let xi = x[i];
                    out[i] -= xi * xi * xi;
                }
                out
            }
            Self::Sine { .. } => x.map(f64::sin),
            Self::Square { .. } => x.map(|v| v * v),
            Self::Zero { out_dim, .. } => DVector::zeros(*out_dim),
            Self::Sum { members } => {
                let mut out = members[0].eval(x);
                for m in &members[1..] {
                    out += m.eval(x);
                }
                out
            }
            Self::Composed { left, inner, right } => left * inner.eval(&(right * x)),
            Self::Custom { field, .. } => field.eval(x),
        }
    }

    /// Exact point-symmetry verdict for catalog kinds; `None` for custom
    /// fields, whose symmetry can only be sampled.
    pub fn point_symmetric_exact(&self) -> Option<bool> {
        match self {
            Self::Affine { .. } | Self::CubicDrift { .. } | Self::Sine { .. } | Self::Zero { .. } => {
                Some(true)
            }
            Self::Square { dim } => Some(*dim == 0),
            Self::Sum { members } => {
                let mut all = true;
                for m in members {
                    match m.point_symmetric_exact() {
                        Some(true) => {}
                        Some(false) => return Some(false),
                        None => all = false,
                    }
                }
                if all {
                    Some(true)
                } else {
                    None
                }
            }
            Self::Composed { inner, .. } => inner.point_symmetric_exact(),
            Self::Custom { field, .. } => field.point_symmetric_hint(),
        }
    }

    /// Whether any component-wise cube appears anywhere in the field.
    pub fn contains_cubic(&self) -> bool {
        match self {
            Self::CubicDrift { .. } => true,
            Self::Sum { members } => members.iter().any(|m| m.contains_cubic()),
            Self::Composed { inner, .. } => inner.contains_cubic(),
            _ => false,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero { .. } => true,
            Self::Affine { a } => a.iter().all(|&v| v == 0.0),
            Self::Sum { members } => members.iter().all(|m| m.is_zero()),
            Self::Composed { left, inner, right } => {
                inner.is_zero() || left.iter().all(|&v| v == 0.0) || right.iter().all(|&v| v == 0.0)
            }
            _ => false,
        }
    }

    /// The matrix `A` when the field is exactly `x -> A x`, else `None`.
    /// Sums of linear members fold; everything else is non-linear.
    pub fn as_linear(&self) -> Option<DMatrix<f64>> {
        match self {
            Self::Affine { a } => Some(a.clone()),
            Self::Zero { in_dim, out_dim } => Some(DMatrix::zeros(*out_dim, *in_dim)),
            Self::Sum { members } => {
                let mut acc: Option<DMatrix<f64>> = None;
                for m in members {
                    let lm = m.as_linear()?;
                    acc = Some(match acc {
                        None => lm,
                        Some(a) => a + lm,
                    });
                }
                acc
            }
            Self::Composed { left, inner, right } => {
                inner.as_linear().map(|a| left * a * right)
            }
            _ => None,
        }
    }

    /// `x -> left * F(right * x)` with linear kinds folded in closed form.
    pub fn compose(&self, left: &DMatrix<f64>, right: &DMatrix<f64>) -> Self {
        if let Some(a) = self.as_linear() {
            return Self::Affine { a: left * a * right };
        }
        match self {
            Self::Sum { members } => Self::Sum {
                members: members.iter().map(|m| m.compose(left, right)).collect(),
            },
            // flatten nested triples so repeated balancing stays exact
            Self::Composed {
                left: l0,
                inner,
                right: r0,
            } => Self::Composed {
                left: left * l0,
                inner: inner.clone(),
                right: r0 * right,
            },
            other => Self::Composed {
                left: left.clone(),
                inner: Box::new(other.clone()),
                right: right.clone(),
            },
        }
    }

    /// Global Lipschitz constant in the norm induced by SPD `x_mat`, when the
    /// catalog provides one: `||X^{1/2}(F(x)-F(y))|| <= c ||X^{1/2}(x-y)||`.
    ///
    /// Element-wise 1-Lipschitz kinds (sine) get the exact constant 1 only
    /// under diagonal `X`; linear kinds are exact for any SPD `X`.
    pub fn lipschitz_in_norm(&self, x_mat: &DMatrix<f64>) -> Option<f64> {
        if self.is_zero() {
            return Some(0.0);
        }
        if let Some(a) = self.as_linear() {
            return Some(weighted_operator_norm(&a, x_mat));
        }
        match self {
            Self::Sine { .. } if is_diagonal(x_mat) => Some(1.0),
            _ => None,
        }
    }
}

/// `||X^{1/2} A X^{-1/2}||_2` for SPD `X` (square `A`) — the Lipschitz
/// constant of `x -> Ax` in the X-norm. For rectangular `A` (output space
/// unweighted) this is `||A X^{-1/2}||_2`.
pub fn weighted_operator_norm(a: &DMatrix<f64>, x_mat: &DMatrix<f64>) -> f64 {
    let (sqrt_x, inv_sqrt_x) = spd_sqrt_pair(x_mat);
    let weighted = if a.nrows() == x_mat.nrows() {
        &sqrt_x * a * &inv_sqrt_x
    } else {
        a * &inv_sqrt_x
    };
    spectral_norm(&weighted)
}

/// Symmetric square root and inverse square root of an SPD matrix.
pub fn spd_sqrt_pair(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut sq = DMatrix::zeros(m.nrows(), m.ncols());
    let mut isq = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..eig.eigenvalues.len() {
        let lam = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        let s = lam.sqrt();
        sq += v * v.transpose() * s;
        if s > 0.0 {
            isq += v * v.transpose() / s;
        }
    }
    (sq, isq)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}
