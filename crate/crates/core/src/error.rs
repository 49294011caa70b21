use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by the pipeline stage that raises them; most carry
/// enough context to identify the offending view or file.
#[derive(Debug, Error)]
pub enum Error {
    // Geometry
    #[error("point count mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("coordinate is not finite")]
    NonFiniteValue,

    // Sampling
    #[error("ball query returned no points within the search radius")]
    EmptyPatch,

    // Canonicalization
    #[error("need at least {needed} views, got {got}")]
    TooFewViews { needed: usize, got: usize },
    #[error("degenerate scale: longest bounding-box edge {0} is below threshold")]
    DegenerateScale(f64),

    // Flow model
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step} (loss = {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },

    // Sampler
    #[error("flow state became non-finite at integration step {step}")]
    NonFiniteState { step: usize },

    // Curation
    #[error("no valid sample found after {attempts} attempts")]
    NoValidSample { attempts: usize },
    #[error("synthetic scene generation exhausted {attempts} retries")]
    RetryExhausted { attempts: usize },

    // Evaluation
    #[error("evaluation input is empty")]
    EmptyInput,

    // IO
    #[error("unsupported file format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed header at byte offset {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),
    #[error("manifest error: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
