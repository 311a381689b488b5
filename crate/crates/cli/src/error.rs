use ordchange_core::Error as CoreError;
use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("misaligned records: {0}")]
    Alignment(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::Alignment(_) => 6,
            CliError::GradcheckFailed(_) => 7,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(io) => CliError::Io(io.to_string()),
            CoreError::NonFinite(d) => CliError::Numeric(d.to_string()),
            CoreError::Checkpoint(m) => CliError::Checkpoint(m),
            CoreError::Misaligned(m) => CliError::Alignment(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(format!("malformed CSV: {e}"))
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
