//! Crate-wide error type. Every fallible operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Extents disagree with what an operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A dimension index does not address any axis of the operand.
    #[error("dimension index {index} out of range for {rank} sequence dims")]
    DimIndexOutOfRange { index: usize, rank: usize },

    /// Softmax over a row with no allowed entries while in strict mask mode.
    #[error("fully masked softmax row {row} (strict mask mode)")]
    FullyMaskedRow { row: usize },

    /// An operation refused to materialize something above its size guard.
    #[error("{what}: size {actual} exceeds guard {limit}")]
    SizeGuard {
        what: &'static str,
        actual: usize,
        limit: usize,
    },

    /// An iterative solver hit its iteration cap before meeting tolerance.
    #[error("{algorithm} did not converge after {iters} iterations (residual {residual:.3e})")]
    NoConvergence {
        algorithm: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    /// Malformed binary or CSV input file.
    #[error("bad file format: {0}")]
    Format(String),

    /// Training loss stopped being finite.
    #[error("training diverged at step {step} (loss not finite)")]
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
