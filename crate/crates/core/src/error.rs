use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by model construction, sampling, estimation and the oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("model generation failed after {attempts} attempts")]
    Generation { attempts: usize },

    #[error("explicit scheme unstable: dt = {dt:e} exceeds the admissible {max_dt:e}")]
    Unstable { dt: f64, max_dt: f64 },

    #[error("integer overflow while evaluating {0}")]
    Overflow(&'static str),

    #[error("run with seed {seed} failed: {source}")]
    RunFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("epsilon = {epsilon} is not below the expansion bound {bound}")]
    Regime { epsilon: f64, bound: f64 },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(what: impl Into<String>, location: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            location: location.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::Generation { .. }
            | Error::Unstable { .. }
            | Error::Overflow(_) => true,
            Error::RunFailed { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
