use thiserror::Error;

/// Errors produced by the embedding, planning and environment code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("kernel/point domain incompatible")]
    DomainMismatch,
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("zero median distance")]
    ZeroMedianDistance,
    #[error("invalid kernel parameter: {0}")]
    InvalidKernel(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular regularized system")]
    Singular,
    #[error("matrix not PSD")]
    NotPsd,
    #[error("degenerate weights")]
    DegenerateWeights,
    #[error("prediction failure")]
    PredictionFailure,
    #[error("impossible observation")]
    ImpossibleObservation,
    #[error("unknown action {0}")]
    UnknownAction(usize),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dataset format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
