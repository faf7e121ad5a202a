//! Gramian-based balanced truncation for fully nonlinear controlled
//! stochastic differential equations.
//!
//! The pipeline: certify a quadratic one-sided Lipschitz certificate,
//! construct reachability/observability Gramians (exact generalized
//! Lyapunov solutions in the catalog-linear case, epsilon-scaled
//! constructions otherwise), balance and truncate, then validate the
//! a-priori output error bound by coupled Monte Carlo simulation.

pub mod analysis;
pub mod balancing;
pub mod builtins;
pub mod coeff;
pub mod error;
pub mod gramian;
pub mod lyapunov;
pub mod schema;
pub mod sim;
pub mod system;

pub use analysis::{compute_bound, validate_reduction, BoundPolicy, BoundReport, ValidationRun};
pub use balancing::{balance, select_order, truncate, BalancedRealization, OrderPolicy, ReducedSystem};
pub use coeff::{CoefficientField, VectorField};
pub use error::{Error, Result};
pub use gramian::{
    compute_gramians, epsilon_gramians, estimate_lipschitz_data, linear_gramians,
    solve_generalized_lyapunov, solve_generalized_lyapunov_dual, GramianPair, LipschitzData,
    LipschitzMode, Provenance,
};
pub use lyapunov::{
    certify_inequality, eval_lv_cert, eval_s, eval_u, observability_residual,
    reachability_residual, CertifyReport, QuadraticCertificate, SamplingPlan, Which, CERTIFY_TOL,
};
pub use sim::{
    direction_energy, observability_truncation_probe, simulate, simulate_coupled, simulate_raw,
    stability_probe, DecayFit, DirectionEnergy, ObsProbe, PairedResult, SimGrid, SimulationResult,
};
pub use system::{
    linearize_catalog, multiplicative_control, validate_system, ControlKind, ControlSignal,
    LinearSystemView, StochasticSystem, SymmetryCertificate, ValidationReport,
};
