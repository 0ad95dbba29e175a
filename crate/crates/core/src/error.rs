use std::io;

use thiserror::Error;

/// Errors raised by the sortpipe library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("dense before flatten (layer `{0}`)")]
    DenseBeforeFlatten(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("maxpool `{layer}` window {window} does not divide input {height}x{width}")]
    NonDivisiblePool {
        layer: String,
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("dimension overflow at layer `{0}`")]
    DimensionOverflow(String),

    #[error("weight file magic mismatch (found {0:?})")]
    MagicMismatch([u8; 4]),

    #[error("length mismatch: expected {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite weight at index {0}")]
    NonFiniteWeight(usize),

    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),

    #[error("invalid fixed-point format ({total},{integer})")]
    InvalidFormat { total: u32, integer: u32 },

    #[error("missing plan entry for layer `{0}`")]
    MissingPlanEntry(String),

    #[error("empty input set")]
    EmptyInputSet,

    #[error("invalid stage timing: {0}")]
    InvalidStages(String),

    #[error("zero initiation interval for stage `{0}`")]
    ZeroInitiationInterval(String),

    #[error("rate exceeds pipeline capacity: period {period_us} us is below the {stage} II of {ii_us} us")]
    RateExceedsCapacity {
        stage: String,
        period_us: f64,
        ii_us: f64,
    },

    #[error("non-positive latency for `{0}`")]
    NonPositiveLatency(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("empty log")]
    EmptyLog,

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-numeric logit at row {row}, column {column}")]
    NonNumericLogit { row: usize, column: usize },

    #[error("label out of range at row {row}: {label} >= {classes}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
