use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("geometry error at level {level}: {reason}")]
    Geometry { level: usize, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("no class could be evaluated")]
    NoEvaluableClass,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
