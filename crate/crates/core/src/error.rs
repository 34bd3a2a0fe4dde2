use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations, model construction and forward passes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands (or an operand and an expected layout) disagree on shape.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A configuration value violates an invariant.
    #[error("config error: {0}")]
    Config(String),
    /// An operation was used outside its contract (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    /// The input sequence is shorter than the encoder can subsample.
    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },
    /// Brute-force enumeration refused because the search space is too large.
    #[error("instance too large for enumeration: {paths} paths exceeds {limit}")]
    TooLarge { paths: u128, limit: u128 },
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
