use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Manifest and feature-file validation failures.
#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("{}: bad header: {reason}", path.display())]
    BadHeader { path: PathBuf, reason: String },
    #[error("{}: size mismatch: expected {expected} values, found {actual}", path.display())]
    Size {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("task {task_id}: feature dimension {actual} does not match stream dimension {expected}")]
    DimensionMismatch {
        task_id: usize,
        expected: usize,
        actual: usize,
    },
    #[error("tasks {first} and {second} share classes {shared:?}")]
    Overlap {
        first: usize,
        second: usize,
        shared: Vec<usize>,
    },
    #[error("task {task_id}: sample label {label} is not in the task's class set")]
    ForeignLabel { task_id: usize, label: usize },
    #[error("task {task_id}: label value {value} is not a non-negative integer")]
    BadLabel { task_id: usize, value: f32 },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label error: label {label} outside [0, {limit})")]
    Label { label: usize, limit: usize },
    #[error("optimizer error: parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),
    #[error("training error in {phase}: {reason}")]
    Training { phase: String, reason: String },
    #[error("sequencing error: expected task {expected}, got task {got}")]
    Sequencing { expected: usize, got: usize },
    #[error("prototype error: {0}")]
    Prototype(String),
    #[error("inference error: {0}")]
    Inference(String),
    #[error("frozen component changed: {0}")]
    FrozenViolation(String),
    #[error("index error: {index} out of range 1..={len}")]
    Index { index: usize, len: usize },
    #[error("checkpoint format error in section `{section}`: {reason}")]
    Checkpoint { section: String, reason: String },
    #[error("checkpoint checksum mismatch in section `{section}`")]
    ChecksumMismatch { section: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn training(phase: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Training {
            phase: phase.into(),
            reason: reason.into(),
        }
    }
}
