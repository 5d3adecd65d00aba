use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Every "hard error" surfaces as one of these
/// variants; nothing panics on malformed runtime input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: degenerate vector: row {row} has norm < {eps:e}")]
    DegenerateVector {
        op: &'static str,
        row: usize,
        eps: f64,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("backward: loss tensor was not produced on this graph")]
    LossNotOnGraph,

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("label {label} out of range [0,{n_cls}) at pixel ({y},{x})")]
    LabelOutOfRange {
        label: usize,
        n_cls: usize,
        y: usize,
        x: usize,
    },

    #[error("{path}: malformed dataset file: {msg}")]
    BadDataset { path: PathBuf, msg: String },

    #[error("{path}: malformed checkpoint file: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },

    #[error("config line {line}: {msg}")]
    BadConfig { line: usize, msg: String },

    #[error("seed streams overlap: train and test draw from the same stream")]
    OverlappingSeedStreams,

    #[error("NaN loss at epoch {epoch} step {step}; last good checkpoint retained")]
    NanLoss { epoch: usize, step: usize },

    #[error("empty evaluation: every class has zero union")]
    EmptyEvaluation,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
