use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: {0}")]
    Backward(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("sampling step {step}: non-finite latent")]
    SampleDiverged { step: usize },
    #[error("training step {step}: non-finite loss (last checkpoint: {last_checkpoint})")]
    TrainingDiverged { step: usize, last_checkpoint: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint, mismatched tensors: {0:?}")]
    Incompatible(Vec<String>),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("scorer returned {score} for record `{id}` (expected a value in [-1, 1])")]
    ScoreOutOfRange { id: String, score: f64 },
    #[error("record `{0}` has no score")]
    Unscored(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad input rather than a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Manifest { .. }
                | Error::Incompatible(_)
                | Error::Json(_)
        )
    }
}
