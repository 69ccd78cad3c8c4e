use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-corpus: no characters found in the input sentences")]
    EmptyCorpus,

    #[error("index-out-of-range: id {id} is not below vocabulary size {size}")]
    IndexOutOfRange { id: usize, size: usize },

    #[error("batch-too-large: batch size {batch} exceeds dataset size {dataset}")]
    BatchTooLarge { batch: usize, dataset: usize },

    #[error("shape-error: {0}")]
    Shape(String),

    #[error("range-error: {0}")]
    Range(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergence at iteration {iteration}: {term} = {value}")]
    Divergence {
        iteration: u64,
        term: &'static str,
        value: f64,
    },

    #[error("empty-input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate-corpus: no {n}-grams in {which} corpus")]
    DegenerateCorpus { n: usize, which: &'static str },

    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("incompatible-checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checksum-failure: {}", path.display())]
    ChecksumFailure { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
