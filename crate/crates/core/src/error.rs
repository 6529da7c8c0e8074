use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("overflow at site {site}")]
    Overflow { site: u128 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("divergent series: {0}")]
    Divergent(String),

    #[error("internal consistency failure at site {site}: {detail}")]
    InternalConsistency { site: u128, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(msg: impl Into<String>) -> LabError {
    LabError::InvalidArgument(msg.into())
}
