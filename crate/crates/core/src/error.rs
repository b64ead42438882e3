use thiserror::Error;

/// Errors raised by the analysis library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter `{name}` = {value} is invalid: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("empty chain")]
    EmptyChain,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("addition prerequisite fails: {non_central} branches are non-central (at most one allowed)")]
    AdditionPrerequisite { non_central: usize },
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),
    #[error("{what} of size {size} exceeds the limit {limit}")]
    SizeLimit {
        what: &'static str,
        size: usize,
        limit: usize,
    },
    #[error("length mismatch: expected {expected} entries, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("component `{0}` is not a general linear transform")]
    NotGeneralLinear(&'static str),
    #[error("solver did not converge after {iterations} iterations (residuals {residuals:?})")]
    NonConvergence {
        iterations: usize,
        residuals: [f64; 2],
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_param(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<()> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: if value.is_finite() { reason } else { "must be finite" },
        })
    }
}
