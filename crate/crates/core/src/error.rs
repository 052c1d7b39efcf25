use thiserror::Error;

use crate::smiles::SmilesError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("frozen prefix {0:?} matches no parameter")]
    UnmatchedFreeze(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Smiles(#[from] SmilesError),

    #[error("reaction: {0}")]
    Reaction(String),

    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },

    #[error("template: {0}")]
    Template(String),

    #[error("config: {0}")]
    Config(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("power-law fit: {0}")]
    PowerLaw(String),

    #[error("vocabulary hash mismatch: checkpoint {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
