use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error(transparent)]
    Core(#[from] tod_core::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("acceptance checks failed: {}", .0.join("; "))]
    Acceptance(Vec<String>),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage/config, 2 runtime, 3 acceptance.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(_) | CliError::Io { .. } => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}
