use std::path::Path;

use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("split: {0}")]
    Split(String),
    #[error("embeddings: {0}")]
    Embedding(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("episode: {0}")]
    Episode(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("training: {0}")]
    Train(String),
    #[error("loss component `{component}` is not finite")]
    NonFiniteLoss { component: &'static str },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
