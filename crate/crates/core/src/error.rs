use thiserror::Error;

/// Diagnostics captured when training produces a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteLoss {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub components: Vec<(String, f64)>,
}

impl std::fmt::Display for NonFiniteLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite loss {} at epoch {} batch {}",
            self.loss, self.epoch, self.batch
        )?;
        for (name, value) in &self.components {
            write!(f, ", {name}={value}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("{0}")]
    NonFinite(Box<NonFiniteLoss>),

    #[error("misaligned records: {0}")]
    Misaligned(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
