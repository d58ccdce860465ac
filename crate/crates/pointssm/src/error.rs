use pointssm_core::Error as CoreError;

/// Failures reported by the command line, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or config values. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or malformed inputs, checkpoints and datasets. Exit code 2.
    #[error("{0}")]
    Data(String),
    /// Non-finite values or allocation failure during a run. Exit code 3.
    #[error("{0}")]
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn usage(msg: impl std::fmt::Display) -> Self {
        CliError::Usage(msg.to_string())
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        CliError::Data(msg.to_string())
    }

    /// Wraps an IO failure with the path involved.
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } | CoreError::OutOfMemory { .. } => {
                CliError::Numeric(e.to_string())
            }
            CoreError::Invalid { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
