use alloc::string::String;

/// Everything that can go wrong inside the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-positive variance passed to {0}")]
    NonPositiveVariance(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar node, got {0} elements")]
    NonScalarLoss(usize),
    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("batch-norm statistics for step {0} have not been finalized")]
    StatsNotFinalized(usize),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
