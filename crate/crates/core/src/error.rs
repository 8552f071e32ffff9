use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("target vocabulary size {requested} is too small; minimum feasible size is {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("mask lost to truncation")]
    MaskLost,

    #[error("more than one [MASK] token in prompt ({0} found)")]
    MultipleMasks(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("numeric overflow at layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("label {label} of example `{example}` is outside [0, {n_classes})")]
    LabelOutOfRange {
        example: String,
        label: usize,
        n_classes: usize,
    },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate variance")]
    DegenerateVariance,

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("timer resolution too coarse: {0}")]
    TimerResolution(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Coarse classification used by the command-line front end to pick
    /// an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NumericOverflow { .. }
            | Error::NonFiniteGradient(_)
            | Error::DegenerateVariance
            | Error::Stats(_)
            | Error::TimerResolution(_) => ErrorKind::Numeric,
            Error::Config(_) | Error::UnknownVariant(_) | Error::InvalidTemplate(_) => {
                ErrorKind::Usage
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
