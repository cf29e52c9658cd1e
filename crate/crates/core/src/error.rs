use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("id {id} out of vocabulary for field `{field}` (size {vocab})")]
    OutOfVocabulary { field: String, id: u64, vocab: usize },

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("AUC undefined: scores need at least one positive and one negative label")]
    UndefinedAuc,

    #[error("GAUC undefined: no user has both positive and negative impressions")]
    NoEligibleUser,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config {path}: line {line}, key `{key}`: {message}")]
    ConfigParse {
        path: String,
        line: usize,
        key: String,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("routing error: key {key} belongs to server {owner}, not server {server}")]
    Routing { key: u64, owner: usize, server: usize },

    #[error("barrier timeout at iteration {iteration} on {node}: {missing} participant(s) missing")]
    BarrierTimeout {
        iteration: u64,
        node: String,
        missing: usize,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint has no group `{0}`")]
    MissingGroup(String),

    #[error("checkpoint group `{group}` does not match the model: {detail}")]
    GroupMismatch { group: String, detail: String },

    #[error("{path}: {source}")]
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

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
