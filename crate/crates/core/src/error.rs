use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward has already been run on this tape")]
    BackwardAlreadyRun,
    #[error("{count} ROIs exceed the cap of {max}")]
    TooManyRois { count: usize, max: usize },
    #[error("no masked positions in batch")]
    NoMaskedPositions,
    #[error("no maskable positions in sequence")]
    NoMaskablePositions,
    #[error("batch of size {0} is too small; at least 2 pairs are required")]
    BatchTooSmall(usize),
    #[error("contrastive ratio is not strictly positive (matched sum {numerator}, mismatched sum {denominator})")]
    NonPositiveRatio { numerator: f64, denominator: f64 },
    #[error("bottleneck {bottleneck} must satisfy 1 <= m < {hidden}")]
    InvalidBottleneck { bottleneck: usize, hidden: usize },
    #[error("parameter `{0}` matches no partition rule")]
    UnknownParameter(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("missing gradient for trainable tensor `{0}`")]
    MissingGradient(String),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("no ROIs left after score filtering")]
    EmptyAfterFilter,
    #[error("checkpoint version {found} does not match supported version {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("split has {available} samples, {requested} requested")]
    SplitTooSmall { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contrastive loss stayed non-positive after {retries} batch retries at step {step}")]
    RetriesExhausted { step: u64, retries: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
