use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value left the mathematical domain of an operation (log of a
    /// non-positive number, non-finite intermediate, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration or command-line input.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Inconsistent graph structure (dangling indices, empty node set, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Optimization diverged or could not proceed.
    #[error("training failed at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (manifest, feature file, checkpoint, ...).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for usage/validation problems,
    /// 2 for i/o and runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Domain(_) | Error::Config(_) | Error::Graph(_) => 1,
            Error::Training { .. } | Error::Io(_) | Error::Format(_) => 2,
        }
    }
}
