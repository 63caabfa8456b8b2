//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes at an operation boundary.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A second backward pass was requested on a tape that has already
    /// been consumed.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// API misuse (stepping a finished episode, backward on a detached
    /// value, and the like).
    #[error("{0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// External-environment wire protocol failure.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A loss term came out NaN or infinite; the update is aborted.
    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
