//! Crate-wide error type.
//!
//! Every fallible operation in the simulator returns [`Result`]. Variants are
//! grouped by failure category so the CLI can map them to exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced a NaN or infinity from finite inputs.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// Input outside the mathematical domain of the operation (log/sqrt of
    /// a negative, for example).
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A caller violated an API contract (missing gradient, non-scalar loss,
    /// un-normalized rows, missing stop-gradient, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Batch too small for a batch-statistics operation.
    #[error("{op}: degenerate batch of size {batch} (need at least {min})")]
    DegenerateBatch {
        op: &'static str,
        batch: usize,
        min: usize,
    },

    /// Invalid architecture or SSL method specification.
    #[error("invalid spec: {0}")]
    Spec(String),

    /// Client parameter sets disagree during aggregation.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Dirichlet partitioning could not produce a valid split.
    #[error("partition error: {0}")]
    Partition(String),

    /// A dataset file failed an integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Malformed or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Metric computation over invalid inputs.
    #[error("metric error: {0}")]
    Metric(String),

    /// Malformed container, snapshot, or npy file.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    /// Stable category name, used by the CLI for exit codes and by logs.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::Domain { .. } => "domain",
            Error::Contract { .. } => "contract",
            Error::DegenerateBatch { .. } => "degenerate-batch",
            Error::Spec(_) => "spec",
            Error::Aggregation(_) => "aggregation",
            Error::Partition(_) => "partition",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Metric(_) => "metric",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }
}
