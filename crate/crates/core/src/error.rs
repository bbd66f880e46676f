use std::path::PathBuf;

/// Errors produced by the alignment toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape mismatch, out-of-range argument or non-finite input.
    #[error("invalid input: {0}")]
    Input(String),
    /// Unknown or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A record in a line-delimited file could not be parsed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// Training produced a non-finite loss or parameter.
    #[error("divergence in {phase} at step {step}: {message}")]
    Divergence {
        phase: String,
        step: u64,
        message: String,
    },
    /// Numerical integration hit a non-finite state.
    #[error("non-finite state during sampling at step {step}")]
    SamplingNonFinite { step: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
