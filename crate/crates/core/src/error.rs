use thiserror::Error;

/// Errors produced by model construction, solvers and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("coefficient `{name}` does not vanish at the origin (|F(0)| = {norm:.3e})")]
    OriginViolation { name: String, norm: f64 },

    #[error("noise covariance K is not positive semidefinite (smallest eigenvalue {min_eig:.3e})")]
    CovarianceNotPsd { min_eig: f64 },

    #[error("matrix `{name}` is not positive definite (Cholesky failed)")]
    NotPositiveDefinite { name: String },

    #[error("free parameter U too small: U_X has non-positive eigenvalue {min_eig:.3e}")]
    FreeParameterTooSmall { min_eig: f64 },

    #[error("empty sampling plan")]
    EmptySamplingPlan,

    #[error("generalized Lyapunov operator is singular (system not mean-square stable); smallest singular value {sigma_min:.3e}")]
    SingularLyapunovOperator { sigma_min: f64 },

    #[error("dense Kronecker solve refused for n = {n} (limit {limit})")]
    SizeRefused { n: usize, limit: usize },

    #[error("system is not mean-square stable: {detail}")]
    Unstable { detail: String },

    #[error("one-sided Lipschitz condition fails (lambda = {lambda:.3e}); no Gramian constructible by the epsilon route")]
    LipschitzFailure { lambda: f64 },

    #[error("Gramian certification failed after {halvings} halvings; worst residual {residual:.3e} at sampled pair")]
    CertificationFailed { halvings: u32, residual: f64 },

    #[error("balancing undefined: {detail}")]
    BalancingUndefined { detail: String },

    #[error("reduced order r = {r} out of range 1..={n}")]
    OrderOutOfRange { r: usize, n: usize },

    #[error("invalid order-selection policy: {detail}")]
    InvalidOrderPolicy { detail: String },

    #[error("divergent ensemble: {flagged} of {paths} paths exceeded the explosion threshold")]
    DivergentEnsemble { flagged: usize, paths: usize },

    #[error("simulation failure: {detail}")]
    SimulationFailure { detail: String },

    #[error("point-symmetry certificate missing for {name}; the output error bound requires f, G and Gamma to be point symmetric")]
    MissingPointSymmetry { name: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
