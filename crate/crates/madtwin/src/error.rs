//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the pipeline.
///
/// The CLI maps these onto process exit codes: configuration problems exit
/// with 2, data/layout problems with 3, and numeric failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A function was called with arguments that violate its contract
    /// (shape mismatches, out-of-range indices, degenerate sizes).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or override could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset directory does not follow the expected layout.
    #[error("dataset layout error: {0}")]
    DatasetLayout(String),

    /// A checkpoint file is unreadable, truncated, or fails its CRC.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A numeric invariant was violated (non-finite values, failed checks).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric is undefined for the given inputs (e.g. zero-energy target).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// An underlying I/O operation failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::DatasetLayout(_) | Error::CorruptCheckpoint(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::UndefinedMetric(_) => 4,
        }
    }
}
