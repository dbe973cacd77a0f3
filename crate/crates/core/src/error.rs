use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::model::HeadKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence is too short ({len} tokens, need {min})")]
    SequenceTooShort { len: usize, min: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("operation requires a {expected:?} head, model has {found:?}")]
    WrongHead { expected: HeadKind, found: HeadKind },

    #[error("model already contains mixture-of-experts layers")]
    AlreadyMoe,

    #[error("model contains no mixture-of-experts layers")]
    NotMoe,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("merge weights violate the shared-rate constraint: sum {sum}, expected {expected}")]
    MergeConstraint { sum: f64, expected: f64 },

    #[error("expert count mismatch: layer {layer} has {found} normal experts, merge params have {expected}")]
    ExpertCountMismatch {
        layer: usize,
        found: usize,
        expected: usize,
    },

    #[error("vocabulary mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("malformed record at line {line}: {source}")]
    Jsonl {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
