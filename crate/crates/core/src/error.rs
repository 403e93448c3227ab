use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum CelError {
    #[error("cannot normalize a vector with norm {norm:e}")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch too small: K = {k}, at least 2 utterances are required")]
    BatchTooSmall { k: usize },
    #[error("invalid batch shape: {0}")]
    BatchShapeInvalid(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("a classification loss needs at least 2 classes")]
    SingleClass,
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("signal too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("utterance too short for cropping: need {needed} samples, got {got}")]
    UtteranceTooShort { needed: usize, got: usize },
    #[error("impulse response is empty")]
    EmptyImpulse,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pre-normalization embedding is degenerate (norm {norm:e})")]
    NormalizationDegenerate { norm: f64 },
    #[error("activation cache was produced by a different parameter version")]
    StaleCache,
    #[error("corpus too small: batch needs {needed} utterances, {available} eligible")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("corpus has no speaker labels: {0}")]
    MissingLabels(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("degenerate trial set: {0}")]
    DegenerateTrials(&'static str),
    #[error("unknown utterance id `{0}`")]
    UnknownId(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unsupported audio in {path}: {msg}")]
    Audio { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CelError> = std::result::Result<T, E>;
