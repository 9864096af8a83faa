use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("data format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in layer {layer} at timestep {step}")]
    NonFiniteState { layer: usize, step: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch} ({regime}, reset {reset}): {detail}")]
    Divergence {
        epoch: usize,
        regime: String,
        reset: bool,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Serde(_) => 2,
            Error::Format { .. } | Error::Data(_) | Error::Io(_) => 3,
            Error::NonFiniteState { .. }
            | Error::NonFinite(_)
            | Error::NonFiniteGradient(_)
            | Error::Divergence { .. } => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(std::io::Error::other(e.to_string()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
