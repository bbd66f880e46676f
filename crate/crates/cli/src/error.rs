use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("cannot parse config: {0}")]
    ConfigParse(String),
    #[error("missing {}: run `flowpref {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] flowpref_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("cannot configure thread pool: {0}")]
    Threads(String),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::ConfigParse(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
