use thiserror::Error;

use crate::schemes::ImplicitSolveReport;

pub type Result<T> = std::result::Result<T, SdeError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    /// A state handed to a model or kernel lies outside the model domain.
    #[error("state {state:?} lies outside the model domain")]
    Domain { state: Vec<f64> },

    /// None of the evaluation routes (analytic, Jacobian, finite differences)
    /// is usable for the requested quantity.
    #[error("no evaluation route available: {0}")]
    Capability(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("implicit solve failed: {message}")]
    Solve {
        message: String,
        report: ImplicitSolveReport,
    },

    #[error("implicit solve returned {state:?}, outside the model domain")]
    DomainEscape {
        state: Vec<f64>,
        report: ImplicitSolveReport,
    },

    /// A Monte Carlo sample aborted. Sample and step index identify the
    /// failing step reproducibly.
    #[error("sample {sample} failed at step {step} with h = {h}: {source}")]
    Sample {
        sample: u64,
        step: usize,
        h: f64,
        #[source]
        source: Box<SdeError>,
    },
}

impl SdeError {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        SdeError::Argument(msg.into())
    }

    /// True for failures of the implicit equation solvers, including when
    /// wrapped in a per-sample error.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            SdeError::Solve { .. } | SdeError::DomainEscape { .. } => true,
            SdeError::Sample { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}
