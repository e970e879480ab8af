use thiserror::Error;

/// Error type shared across the simulation pipeline.
///
/// The variants map onto the CLI exit codes: `Config` -> 2,
/// `EstimatorRefused` -> 3, `InvariantViolation` -> 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("state left the phase-space domain at step {step}: {detail}")]
    LeftDomain { step: usize, detail: String },

    #[error("estimator refused: {0}")]
    EstimatorRefused(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn refused(msg: impl Into<String>) -> Self {
        Error::EstimatorRefused(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
