use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("layer {layer} out of range 1..={max}")]
    Layer { layer: usize, max: usize },

    #[error("prefix cache is stale: {0}")]
    StaleCache(String),

    #[error("invalid permutation key: {0}")]
    Key(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input text")]
    EmptyInput,

    #[error("corpus has no usable prompts")]
    EmptyCorpus,

    #[error("sequence of length {len} exceeds context window {max_ctx}")]
    ContextOverflow { len: usize, max_ctx: usize },

    #[error("capture does not fit this attack: {0}")]
    CaptureMismatch(String),

    #[error("no sorted match for observed embedding {index}")]
    NoSortedMatch { index: usize },

    #[error("observed embedding {index} has {count} sorted matches")]
    AmbiguousMatch { index: usize, count: usize },

    #[error("inconsistent relative permutation across observations")]
    InconsistentRecovery,

    #[error("cannot score: {0}")]
    Score(String),

    #[error("bad capture file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
