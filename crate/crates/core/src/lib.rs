//! Double implicit Milstein schemes for stochastic differential equations
//! with non-globally Lipschitz coefficients.
//!
//! The scheme family is parameterised by `theta` (drift implicitness) and
//! `eta` (implicitness of the Ito correction term). Concrete models, a
//! reproducible Brownian fabric and a convergence harness are included.

pub mod error;
pub mod experiments;
pub mod models;
pub mod noise;
pub mod schemes;
pub mod sde;

pub use error::{Result, SdeError};
pub use experiments::{
    fit_power_law, fit_power_law_points, positivity_audit, remainder_diagnostic, run_convergence_study,
    run_convergence_study_with_workers, ConvergenceStudyConfig, ErrorRow, ErrorTable, FitResult, Reference,
};
pub use models::{AitSahaliaParams, GbmParams, Heston32Params, ModelSpec, PolyStressParams};
pub use noise::{BrownianFabric, IncrementMatrix, IteratedIntegrals, RngStreamKey};
pub use schemes::{implicit_step, ImplicitSolveReport, Scheme, SolveMethod, Solver, StepContext};
pub use sde::{AssumptionConstants, Domain, ModelDynamics, SchemeParams, StateVector, ValidationReport};
