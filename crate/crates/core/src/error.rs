//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, data handling, and the run harness.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A NaN or infinity reached an operation boundary.
    NonFinite { op: &'static str },
    /// `backward` was called on a tape that has already been consumed.
    TapeConsumed,
    /// `backward` was called on a non-scalar tensor.
    NonScalarLoss { len: usize },
    /// Optimizer step requested before any gradient was accumulated.
    StepBeforeBackward { param: String },
    /// The fast-weight inner loop produced non-finite values.
    InnerLoopDiverged { token_index: usize },
    /// Training aborted on a non-finite loss.
    Divergence { batch_index: usize },
    /// Invalid configuration value or malformed config text.
    Config(String),
    /// Malformed or truncated on-disk artifact.
    Format(String),
    /// Checkpoint config fingerprint does not match the active config.
    FingerprintMismatch { expected: u64, found: u64 },
    /// Unknown parameter name in a checkpoint or partition request.
    UnknownParameter(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::NonFinite { op } => write!(f, "{op}: non-finite value at operation boundary"),
            Self::TapeConsumed => write!(f, "backward already ran on this tape; re-record the forward pass"),
            Self::NonScalarLoss { len } => write!(f, "backward requires a scalar loss, got {len} elements"),
            Self::StepBeforeBackward { param } => {
                write!(f, "optimizer step before backward: no gradient for '{param}'")
            }
            Self::InnerLoopDiverged { token_index } => {
                write!(f, "inner loop diverged (non-finite fast weights) at token {token_index}")
            }
            Self::Divergence { batch_index } => {
                write!(f, "training diverged: non-finite loss at batch {batch_index}")
            }
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::FingerprintMismatch { expected, found } => write!(
                f,
                "checkpoint fingerprint {found:#018x} does not match config fingerprint {expected:#018x}"
            ),
            Self::UnknownParameter(name) => write!(f, "unknown parameter '{name}'"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 divergence, 4 i/o and
    /// malformed artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::UnknownParameter(_) => 2,
            Self::Divergence { .. } | Self::InnerLoopDiverged { .. } | Self::NonFinite { .. } => 3,
            Self::Io(_) | Self::Format(_) | Self::FingerprintMismatch { .. } => 4,
            _ => 1,
        }
    }
}
