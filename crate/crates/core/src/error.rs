use alloc::string::String;

/// Errors raised by the pure algorithmic layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("row {row}: softmax row sums to {sum}, expected 1 within 1e-6")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("row {row}, column {col}: value {value} out of range")]
    RangeViolation { row: usize, col: usize, value: f64 },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ShapeViolation {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("label {label} outside category range 0..{num_categories}")]
    LabelOutOfRange { label: usize, num_categories: usize },
    #[error("clip has no patches")]
    EmptyClip,

    #[error("category space needs at least 2 names, got {0}")]
    TooFewCategories(usize),
    #[error("category name at index {0} is empty")]
    EmptyCategoryName(usize),
    #[error("duplicate category name {0:?} (case-insensitive)")]
    DuplicateCategory(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("invalid configuration: {0}")]
    Config(&'static str),

    #[error("distribution has no positive entry")]
    AllZero,
    #[error("distribution contains a non-finite or negative entry")]
    NonFinite,
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("trace config expects {expected} patches, clip has {found}")]
    PatchCountMismatch { expected: usize, found: usize },

    #[error("trace is empty")]
    EmptyTrace,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("malformed trace: {0}")]
    MalformedTrace(&'static str),

    #[error("expected sequence length {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("parameter tensor {0:?} missing or misshapen")]
    BadTensor(String),

    #[error("duplicate prediction for clip {0:?}")]
    DuplicateClip(String),
    #[error("prediction for unknown clip {0:?}")]
    UnknownClip(String),
    #[error("clip {0:?} carries more than one label; top-1 accuracy needs single-label data")]
    MultiLabelData(String),
    #[error("no category has both positive and negative clips")]
    NoScorableCategory,

    #[error("response names no known category")]
    Unparseable,
}
