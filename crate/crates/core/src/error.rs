use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty histogram")]
    EmptyHistogram,

    #[error("non-finite score")]
    NonFiniteScore,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("label out of range: {label} with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unreadable blob {path}: {source}")]
    UnreadableBlob {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("class too small to split: class {class} has {count} samples")]
    ClassTooSmall { class: usize, count: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("lambda underflow: {lambda} below floor {floor}")]
    LambdaUnderflow { lambda: f64, floor: f64 },

    #[error("class {class} has {available} training samples, {requested} requested without replacement")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("degenerate feature: zero-norm feature vector")]
    DegenerateFeature,

    #[error("empty records")]
    EmptyRecords,

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
