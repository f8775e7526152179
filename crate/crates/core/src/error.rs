use std::io;

use thiserror::Error;

/// Errors produced anywhere in the retrieval engine.
#[derive(Debug, Error)]
pub enum NdvrError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Wrong magic bytes, unsupported version or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// The byte stream ended early or contradicts its own header.
    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("video has no frames")]
    EmptyVideo,

    #[error("degenerate descriptor: {0}")]
    DegenerateDescriptor(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("kernel matrix rank deficient: requested {requested} components, only {achievable} achievable")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An id or label that does not resolve.
    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("state error: {0}")]
    State(String),

    #[error("signature has no keyframes at level {0}")]
    EmptySignature(String),

    #[error("recall undefined for query {0}: no relevant videos")]
    UndefinedRecall(String),

    /// A pipeline stage was run before the stage that produces its inputs.
    #[error("stage `{stage}` requires output of stage `{missing}` (missing {path})")]
    Ordering {
        stage: String,
        missing: String,
        path: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NdvrError>;
