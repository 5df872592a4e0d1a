//! Crate-wide error type.
//!
//! Numeric routines fail on malformed inputs (bad dimensions, non-finite
//! values, probability rows that do not sum to one); the brute-force oracles
//! fail when a problem instance exceeds their enumeration guards; the harness
//! fails on malformed configs. All of these surface as [`Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed argument: wrong shape, non-finite value, inconsistent sizes.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A value fell outside its documented domain (index, time, probability).
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A brute-force routine was asked to enumerate past its hard guard.
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    /// Every mixture component has zero posterior weight under the evidence.
    #[error("degenerate evidence: all mixture components have zero posterior weight")]
    DegenerateEvidence,

    /// A sampler was asked to unmask fewer positions than are already frozen.
    #[error("schedule violation: {0}")]
    ScheduleViolation(String),

    /// An internal invariant would be broken (e.g. overwriting a frozen token).
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// An operation needed a stored observation that was never set.
    #[error("missing observation: {0}")]
    MissingObservation(String),

    /// Config or kernel-file parse failure.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
