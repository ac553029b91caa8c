//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, numerics, inference, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the mathematical domain of an operation
    /// (NaN inputs, nonpositive scales, out-of-range probabilities, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation would overflow 64-bit floating point
    /// (e.g. `erfcx(x)` for `x < -26`, where `exp(x^2)` exceeds `f64::MAX`).
    #[error("overflow: {0}")]
    Overflow(String),

    /// Matrix/vector dimensions disagree with the model configuration.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A structural capacity was exceeded (feature columns beyond `k_max`,
    /// brute-force ground sets beyond the enumeration cap, ...).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Inference produced a non-finite intermediate or violated a guaranteed
    /// invariant (e.g. the bound decreased); the sweep is rolled back.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A data, mask, checkpoint, or metrics file could not be read or written.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file was syntactically malformed (CSV structure, binary header, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// A checkpoint failed integrity verification.
    #[error("checkpoint checksum mismatch: {0}")]
    Checksum(String),

    /// A checkpoint was written by an incompatible format version.
    #[error("unsupported checkpoint version: {0}")]
    Version(u32),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
