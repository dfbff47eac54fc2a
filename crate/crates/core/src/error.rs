use std::io;

use thiserror::Error;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("query has no terms")]
    EmptyQuery,
    #[error("prompt skeleton needs {needed} tokens but max_len is {max_len}")]
    PromptOverflow { needed: usize, max_len: usize },
    #[error("token id {id} out of range for table of size {size}")]
    TokenRange { id: u32, size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension {0} is not one of the configured MRL dimensions")]
    MrlDim(usize),
    #[error("ragged worker batches: {0}")]
    BatchShape(String),
    #[error("zero-norm embedding prefix in {0}")]
    DegenerateEmbedding(String),
    #[error("non-finite value in {term}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerics { term: String, step: Option<usize> },
    #[error("x must be positive, got {0}")]
    Domain(f64),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("target values have zero variance")]
    DegenerateTarget,
    #[error("index is empty")]
    EmptyIndex,
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("no ranking for query {0}")]
    MissingRanking(u32),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerics(term: impl Into<String>) -> Self {
        Error::Numerics {
            term: term.into(),
            step: None,
        }
    }
}
