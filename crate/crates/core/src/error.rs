use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MjsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("Markov chain is not ergodic: {0}")]
    NotErgodic(String),

    #[error("mixing threshold not reached within {cap} steps")]
    CapExceeded { cap: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("matrix {0} is not positive semidefinite")]
    NotPsd(String),

    #[error("decay pair requires rho < 1, got {rho}")]
    InvalidDecayPair { rho: f64 },

    #[error("inner solve R + B'φB is singular in mode {mode}")]
    SingularInnerSolve { mode: usize },

    #[error("closed loop is not mean-square stable (spectral radius {rho})")]
    NotMss { rho: f64 },

    #[error("regressors for mode {mode} are rank deficient")]
    DegenerateRegressors { mode: usize },

    #[error("random model generation failed after {attempts} draws")]
    GenerationFailed { attempts: usize },
}

pub type Result<T> = std::result::Result<T, MjsError>;
