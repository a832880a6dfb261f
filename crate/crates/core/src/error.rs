use thiserror::Error;

/// Errors raised by the modelling pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrkError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("support {index} does not intersect any BAU")]
    EmptySupport { index: usize },

    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("prior variant mismatch: {0}")]
    VariantMismatch(String),

    #[error("family `{family}` with link `{link}` is not an allowed combination (see the family/link compatibility table)")]
    ForbiddenCombination { family: String, link: String },

    #[error("size parameter missing for BAU {bau}")]
    SizeParameterMissing { bau: usize },

    #[error("value {value} at position {index} is outside the support of the {family} family")]
    OutsideSupport { family: String, index: usize, value: f64 },

    #[error("inner Newton iteration did not converge after {iterations} steps (max |gradient| = {grad_norm:e})")]
    InnerConvergence { iterations: usize, grad_norm: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("zero truth value at locations {0:?}")]
    ZeroTruth(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, FrkError>;
