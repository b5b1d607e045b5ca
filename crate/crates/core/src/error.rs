use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum NtkError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("feature vector is not unit norm (norm = {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("label must be -1 or +1, got {0}")]
    InvalidLabel(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite weights at step {step}")]
    NonFinite { step: usize },

    #[error("example stream exhausted after {consumed} of {requested} steps")]
    OracleExhausted { consumed: usize, requested: usize },

    #[error("margin {gamma} is too small to build a witness")]
    DegenerateMargin { gamma: f64 },

    #[error("exhaustive enumeration needs {required} points, cap is {cap}")]
    CapExceeded { required: u128, cap: usize },

    #[error(
        "rejection sampling acceptance rate {rate:.3e} is too low; lower the margin or raise the dimension"
    )]
    AcceptanceTooLow { rate: f64 },

    #[error("no iterates to check")]
    MissingIterates,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NtkError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> NtkError {
    NtkError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(NtkError::DimensionMismatch { expected, found })
    }
}
