use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular kinetics: exchange current density {0} must be positive")]
    SingularKinetics(f64),

    #[error("capacity measurement failed: {0}")]
    Measurement(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("cannot extrapolate: {0}")]
    Extrapolation(String),

    #[error("profile violates limits at every scale down to {0}")]
    DegenerateProfile(f64),

    #[error("voltage hold failed at t = {time_s} s: {msg}")]
    Hold { time_s: f64, msg: String },

    #[error("replay violates limits at t = {time_s} s: {msg}")]
    Replay { time_s: f64, msg: String },

    #[error("evaluation failed at variable {index}: {msg}")]
    Evaluation { index: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
