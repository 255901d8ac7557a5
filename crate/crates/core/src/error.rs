use thiserror::Error;

/// Errors raised by the estimators and their numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrtbError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("no association between blocks: {0}")]
    NoAssociation(String),

    #[error("rank deficiency: {0}")]
    RankDeficiency(String),

    #[error("degenerate initialization: {0}")]
    DegenerateInitialization(String),

    #[error("degenerate scores: {0}")]
    DegenerateScores(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, CrtbError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CrtbError {
    CrtbError::InvalidInput(msg.into())
}

pub(crate) fn mismatch(msg: impl Into<String>) -> CrtbError {
    CrtbError::DimensionMismatch(msg.into())
}
