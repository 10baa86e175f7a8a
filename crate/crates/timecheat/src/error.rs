use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backward: seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("backward requires a recorded forward pass (empty tape)")]
    BackwardBeforeForward,
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("channel {channel} out of range for C={c}")]
    ChannelRange { channel: usize, c: usize },
    #[error("duplicate observation at (channel {channel}, time {time})")]
    DuplicateObservation { channel: usize, time: f64 },
    #[error("observation time {time} outside declared span [{t_min}, {t_max}]")]
    TimeOutOfSpan { time: f64, t_min: f64, t_max: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("checkpoint task {checkpoint:?} does not match dataset task {dataset:?}")]
    TaskMismatch {
        checkpoint: crate::data::Task,
        dataset: crate::data::Task,
    },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
