//! Built-in demonstration systems used by the CLI and the test suites.

use nalgebra::DMatrix;

use crate::coeff::CoefficientField;
use crate::system::StochasticSystem;

pub struct Builtin {
    pub name: &'static str,
    pub system: StochasticSystem,
    /// Suggested delta for the certificate (all built-ins work with 1).
    pub delta: f64,
}

/// `A = -2 I + 0.1 * superdiagonal`: diagonally dominant Hurwitz matrix
/// keeping `(A + 1/2 I)^T + (A + 1/2 I) + N^T N` negative definite.
fn a_matrix(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::from_diagonal_element(n, n, -2.0);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 0.1;
    }
    a
}

/// Cubic-drift system with linear multiplicative input and sine diffusion:
/// `f(x) = Ax - x.^3`, `G(x) = 0.1 x`, `Gamma(x) = sin(x)`, `h(x) = x`.
/// All state coefficients are point symmetric, so the output error bound
/// applies.
pub fn example1(n: usize) -> Builtin {
    let a = a_matrix(n);
    let system = StochasticSystem::new(
        CoefficientField::cubic_drift(a),
        DMatrix::from_element(n, 1, 1.0),
        vec![CoefficientField::affine(DMatrix::identity(n, n) * 0.1)],
        vec![CoefficientField::sine(n)],
        vec![DMatrix::zeros(n, 1)],
        CoefficientField::affine(DMatrix::identity(n, n)),
        DMatrix::zeros(n, 1),
        DMatrix::identity(1, 1),
    )
    .expect("example1 dimensions are consistent");
    Builtin {
        name: "example1",
        system,
        delta: 1.0,
    }
}

/// Variant with `G(x) = x.^2`: the Gramians still exist for delta <= 1,
/// but the squared input column breaks point symmetry, so the error bound
/// is refused for this system.
pub fn example2(n: usize) -> Builtin {
    let a = a_matrix(n);
    let system = StochasticSystem::new(
        CoefficientField::cubic_drift(a),
        DMatrix::from_element(n, 1, 1.0),
        vec![CoefficientField::square(n)],
        vec![CoefficientField::sine(n)],
        vec![DMatrix::zeros(n, 1)],
        CoefficientField::affine(DMatrix::identity(n, n)),
        DMatrix::zeros(n, 1),
        DMatrix::identity(1, 1),
    )
    .expect("example2 dimensions are consistent");
    Builtin {
        name: "example2",
        system,
        delta: 1.0,
    }
}

/// Deterministic scalar system `dx = (-x + u) dt`, `y = x`:
/// both Gramians equal 0.5 and the single Hankel singular value is 0.5.
pub fn linear_demo() -> Builtin {
    let system = StochasticSystem::new(
        CoefficientField::affine(DMatrix::from_element(1, 1, -1.0)),
        DMatrix::from_element(1, 1, 1.0),
        vec![CoefficientField::zero(1, 1)],
        vec![CoefficientField::zero(1, 1)],
        vec![DMatrix::zeros(1, 1)],
        CoefficientField::affine(DMatrix::identity(1, 1)),
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
    )
    .expect("linear-demo dimensions are consistent");
    Builtin {
        name: "linear-demo",
        system,
        delta: 1.0,
    }
}

/// Look up a builtin by name. `example1`/`example2` default to n = 6.
pub fn by_name(name: &str) -> Option<Builtin> {
    match name {
        "example1" => Some(example1(6)),
        "example2" => Some(example2(6)),
        "linear-demo" => Some(linear_demo()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{validate_system, SymmetryCertificate};

    #[test]
    fn example1_is_point_symmetric_example2_is_not() {
        let e1 = example1(6);
        let r1 = validate_system(&e1.system);
        assert!(r1.all_passed);
        assert_eq!(r1.point_symmetry, SymmetryCertificate::ExactCatalog);

        let e2 = example2(6);
        let r2 = validate_system(&e2.system);
        assert!(!r2.point_symmetry.holds());
    }

    #[test]
    fn example1_satisfies_the_negative_definiteness_condition() {
        // (A + 1/2 I)^T + (A + 1/2 I) + N^T N must be negative definite
        let n = 6;
        let a = a_matrix(n);
        let nn = DMatrix::identity(n, n) * 0.1;
        let cond = (&a + DMatrix::identity(n, n) * 0.5).transpose()
            + (&a + DMatrix::identity(n, n) * 0.5)
            + nn.transpose() * &nn;
        let max_eig = cond.symmetric_eigen().eigenvalues.max();
        assert!(max_eig < 0.0, "max eigenvalue {max_eig}");
    }
}
