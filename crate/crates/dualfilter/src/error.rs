use std::path::PathBuf;

use dualfilter_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{what} is not available for a {model} model")]
    KindMismatch { what: String, model: &'static str },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("acceptance failed: {0}")]
    Acceptance(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// 0 success, 1 I/O, 2 configuration, 3 numeric failure, 4 acceptance.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } => 1,
            CliError::Config(_) | CliError::KindMismatch { .. } => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
            CliError::Acceptance(_) => 4,
        }
    }
}
