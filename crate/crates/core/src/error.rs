use std::path::PathBuf;

use crate::model::{AttributeCategory, Feasibility};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("manifest schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("manifest schema error: {0}")]
    Schema(String),

    #[error(
        "class {class_id} has {available} accepted {feasibility} {category} prompts, {required} required; regenerate the prompt bank"
    )]
    InsufficientPrompts {
        class_id: u32,
        category: AttributeCategory,
        feasibility: Feasibility,
        available: usize,
        required: usize,
    },

    #[error("backend `{backend}` unavailable: {message}")]
    BackendUnavailable { backend: String, message: String },

    #[error("malformed llm reply: {0}")]
    MalformedReply(String),

    #[error("no manual decision for keyword `{0}`")]
    MissingDecision(String),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("foreground mask is empty for image `{0}`")]
    EmptyMask(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown color `{0}` (not in color bank)")]
    UnknownColor(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no edit config for {dataset}/{category}/{feasibility}")]
    MissingConfig {
        dataset: String,
        category: AttributeCategory,
        feasibility: Feasibility,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("empty training pool: {0}")]
    EmptyPool(String),

    #[error("training diverged at step {step}: loss={loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("insufficient synthetic images for ratio {ratio}: need {needed}, have {available}")]
    InsufficientSynthetic {
        ratio: u32,
        needed: usize,
        available: usize,
    },

    #[error("stage order violation: `{stage}` requires `{requires}` to be complete")]
    StageOrder {
        stage: &'static str,
        requires: &'static str,
    },

    #[error("invalid rating: {0}")]
    InvalidRating(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
