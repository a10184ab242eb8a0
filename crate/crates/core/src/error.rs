use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FuseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input data or parameters violate a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("fallback order exhausted for user `{user}` in channel `{channel}`: needed {needed} more items")]
    FallbackExhausted {
        user: String,
        channel: String,
        needed: usize,
    },

    #[error("infeasible bounds: {0}")]
    Infeasible(String),

    /// A numerical routine produced NaN/inf or could not factorize.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model is not fitted")]
    NotFitted,
}

impl FuseError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        FuseError::Validation(msg.into())
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FuseError::Parse { .. }
                | FuseError::Validation(_)
                | FuseError::UnknownUser(_)
                | FuseError::FallbackExhausted { .. }
                | FuseError::Infeasible(_)
        )
    }
}
