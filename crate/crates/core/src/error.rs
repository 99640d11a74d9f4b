use std::path::PathBuf;

use thiserror::Error;

use crate::engine::RunRecord;

pub type Result<T, E = SmcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmcError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("gradient undefined outside support")]
    OutsideSupport,

    #[error("non-finite gradient at leapfrog step {step}")]
    NonFiniteGradient { step: usize },

    #[error("invalid path parameter: {0}")]
    InvalidPathParameter(String),

    #[error("total particle death: all weights are zero")]
    TotalParticleDeath,

    /// Aborted run; carries the trace recorded up to the failing step.
    #[error("total particle death at step {step}")]
    ParticleDeath { step: usize, trace: Vec<RunRecord> },

    #[error("Newton iterations did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NewtonDivergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("singular Hessian")]
    SingularHessian,

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("at least {required} particles are required, got {got}")]
    TooFewParticles { required: usize, got: usize },

    #[error("runs were produced by different configurations")]
    ConfigMismatch,

    #[error("all normalizing-constant estimates are zero")]
    AllZero,

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl SmcError {
    pub fn config(msg: impl Into<String>) -> Self {
        SmcError::Config(msg.into())
    }

    pub fn is_particle_death(&self) -> bool {
        matches!(
            self,
            SmcError::ParticleDeath { .. } | SmcError::TotalParticleDeath
        )
    }
}
