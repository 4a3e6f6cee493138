use thiserror::Error;

/// Errors raised by the simulation and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: wrong shapes, bad partitions, unknown keys.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A configuration that parses but violates a cross-field constraint.
    #[error("constraint violated: {0}")]
    Constraint(String),
    /// Configuration text that does not match the schema.
    #[error("config schema: {0}")]
    Schema(String),
    /// Negative rate or variance density, signalling misconfigured model functions.
    #[error("model misconfigured: {0}")]
    Model(String),
    /// NaN, blow-up or a failed linear solve.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Jump-count circuit breaker tripped.
    #[error("jump limit of {0} exceeded: process non-regular or rates misconfigured")]
    TooManyJumps(u64),
    /// Matrix expected to be positive semidefinite is not.
    #[error("matrix not PSD: smallest eigenvalue {min_eig:e} (norm {norm:e})")]
    NotPsd { min_eig: f64, norm: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 2 for config errors, 4 for constraint violations,
    /// 1 for everything raised while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::Schema(_) => 2,
            Error::Constraint(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
