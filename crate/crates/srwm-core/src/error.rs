//! Crate-wide error type.

use std::fmt;

/// Errors produced by the numeric kernels, layers, data pipeline and I/O.
#[derive(Debug)]
pub enum Error {
    /// Dimension mismatch; `detail` names both shapes involved.
    Shape { op: &'static str, detail: String },
    /// A non-finite value appeared inside a layer computation.
    NonFinite { step: u64, head: usize, what: &'static str },
    /// A fast-weight entry exceeded the divergence guard during forward.
    Divergence { step: u64, head: usize, max_abs: f64 },
    /// Divergence surfaced inside a training step; names the batch cursor.
    TrainDiverged { cursor: usize, detail: String },
    /// Invalid configuration value.
    Config(String),
    /// A binary file did not start with the expected magic bytes.
    BadMagic { expected: &'static str, found: Vec<u8> },
    /// A binary file ended before the expected payload.
    Truncated { what: String },
    /// Structurally valid file with inconsistent contents.
    FormatInconsistent(String),
    /// Checkpoint was produced under a different resolved configuration.
    ConfigHashMismatch { expected: u64, found: u64 },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NonFinite { step, head, what } => {
                write!(f, "non-finite {what} at step {step}, head {head}")
            }
            Error::Divergence { step, head, max_abs } => write!(
                f,
                "fast-weight divergence at step {step}, head {head}: |entry| = {max_abs:e} exceeds 1e6"
            ),
            Error::TrainDiverged { cursor, detail } => {
                write!(f, "training diverged at batch cursor {cursor}: {detail}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Error::Truncated { what } => write!(f, "truncated file: {what}"),
            Error::FormatInconsistent(msg) => write!(f, "inconsistent file contents: {msg}"),
            Error::ConfigHashMismatch { expected, found } => write!(
                f,
                "checkpoint config hash {found:#018x} does not match resolved config {expected:#018x}"
            ),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
