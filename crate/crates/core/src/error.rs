use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate vector: norm below {0:e}")]
    DegenerateVector(f64),
    #[error("degenerate embedding: pre-normalization norm below {0:e}")]
    DegenerateEmbedding(f64),
    #[error("invalid tape: {0}")]
    InvalidTape(String),
    #[error("training diverged at {0}")]
    TrainingDiverged(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("infeasible domain spec: {0}")]
    InfeasibleSpec(String),
    #[error("degenerate prompt: token {0} has near-zero norm")]
    DegeneratePrompt(usize),
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidValue(_) => "InvalidValue",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Shape(_) => "ShapeMismatch",
            Error::DegenerateVector(_) => "DegenerateVector",
            Error::DegenerateEmbedding(_) => "DegenerateEmbedding",
            Error::InvalidTape(_) => "InvalidTape",
            Error::TrainingDiverged(_) => "TrainingDiverged",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::InfeasibleSpec(_) => "InfeasibleSpec",
            Error::DegeneratePrompt(_) => "DegeneratePrompt",
            Error::PreconditionFailed(_) => "PreconditionFailed",
            Error::Parse { .. } => "ParseError",
            Error::Format(_) => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
