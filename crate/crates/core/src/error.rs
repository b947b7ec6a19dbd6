use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric overflow in tilt exponent at combined index {index} (exponent {exponent})")]
    NumericOverflow { index: usize, exponent: f64 },

    #[error("no convergence after {iterations} iterations (max |score| = {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("singular matrix ({context}); condition estimate {condition:e}")]
    Singular { context: String, condition: f64 },

    #[error("no effective support at the query point")]
    NoEffectiveSupport,

    #[error("group index {index} out of range ({groups} groups)")]
    GroupOutOfRange { index: usize, groups: usize },

    #[error("parse error: {0}")]
    Parse(String),
}

impl DrmError {
    /// True for failures of the numerical procedures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DrmError::NumericOverflow { .. }
                | DrmError::NonConvergence { .. }
                | DrmError::Singular { .. }
                | DrmError::NoEffectiveSupport
        )
    }
}

pub type Result<T> = std::result::Result<T, DrmError>;
