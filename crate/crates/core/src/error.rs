use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum FedError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("non-finite parameters after step {step} of {phase}")]
    NonFiniteStep { phase: &'static str, step: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid layer map: {0}")]
    InvalidLayerMap(String),

    #[error("layer maps of the two parameter vectors differ")]
    LayerMapMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: expected {expected} features, found {found}")]
    WidthMismatch {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("degenerate trajectory: squared endpoint distance {0:e} below threshold")]
    DegenerateTrajectory(f64),

    #[error("trajectory rounds must be strictly increasing: got {got} after {last}")]
    RoundOrder { last: u64, got: u64 },

    #[error("all aggregation weights are zero")]
    AllZeroWeights,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl FedError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
