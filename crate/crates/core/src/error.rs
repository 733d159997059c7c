use std::fmt;

/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data is structurally valid but degenerate for the operation
    /// (e.g. an all-zero channel fed to max normalization).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A file did not match its expected binary layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A configured resource cap was exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn argument(msg: impl fmt::Display) -> Self {
        CoreError::Argument(msg.to_string())
    }

    pub fn format(offset: u64, msg: impl fmt::Display) -> Self {
        CoreError::Format {
            offset,
            message: msg.to_string(),
        }
    }

    /// Process exit code for the CLI: 2 argument, 3 data/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Argument(_) | CoreError::Degenerate(_) | CoreError::Resource(_) => 2,
            CoreError::Format { .. } | CoreError::Io(_) => 3,
            CoreError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
