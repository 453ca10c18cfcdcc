//! Error type shared by the whole crate.

use thiserror::Error;

/// Everything that can go wrong while setting up or running an optimization.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid mesh, material or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The iterative linear solver did not reach the requested tolerance.
    #[error("linear solver failed: {0}")]
    LinearSolver(String),

    /// A dense factorization failed (matrix not positive definite).
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// The optimizer hit its outer iteration cap before converging.
    #[error("iteration cap reached: {0}")]
    IterationCap(String),

    /// The thresholding quality loop exhausted its attempts.
    #[error("thresholding attempts exhausted: {0}")]
    ThresholdExhausted(String),

    /// File I/O while reading configs or writing results.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code associated with this error. Success is 0; each
    /// failure class gets a distinct nonzero code so scripts can branch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::LinearSolver(_) | Error::Factorization(_) => 2,
            Error::IterationCap(_) => 3,
            Error::ThresholdExhausted(_) => 4,
            Error::Io(_) => 5,
        }
    }
}
