use thiserror::Error;

/// Crate-wide error type. Every variant maps to a stable machine-parseable
/// class string used by the CLI's single-line error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl Error {
    pub fn shape(context: impl Into<String>, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }

    /// Stable error-class identifier for machine-parseable CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Contract(_) => "contract-violation",
            Error::Config(_) => "config-error",
            Error::Data(_) => "data-error",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) => "checkpoint-error",
            Error::Io(_) => "io-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
