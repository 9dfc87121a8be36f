use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("step {step} exceeds total steps {total}")]
    Range { step: usize, total: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("all neighbor distances are equal; LID is infinite")]
    InfiniteLid,

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
