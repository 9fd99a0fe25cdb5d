use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("infeasible allocation fractions: {0}")]
    InfeasibleFractions(String),

    #[error("candidate set is empty and no reference label was supplied")]
    MissingReference,

    #[error("exhaustive grid search supports at most 4 classes, got {0}")]
    DimensionTooLarge(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("label row {0} is not one-hot")]
    NotOneHot(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("forward cache does not belong to these parameters")]
    StaleCache,

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
