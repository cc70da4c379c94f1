use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid point {index}: {msg}")]
    InvalidPoint { index: usize, msg: String },

    #[error("invalid view {index}: {msg}")]
    InvalidView { index: usize, msg: String },

    #[error("label map: {0}")]
    LabelMap(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("stale contribution table: built for {table} points, scene has {scene}")]
    StaleTable { table: usize, scene: usize },

    #[error("empty subset")]
    EmptySubset,

    #[error("k-means: K = {k} exceeds {n} points")]
    TooFewPoints { k: usize, n: usize },

    #[error("containment ambiguity: level {level} mask {label} overlaps {parents} parents")]
    Containment { level: usize, label: u32, parents: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("synthetic scene: {0}")]
    Synth(String),

    #[error("non-finite value during {stage} at step {step}")]
    NonFinite { stage: String, step: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// True when the failure is a NaN/inf detected during optimization.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
