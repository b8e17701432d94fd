use thiserror::Error;

use crate::model::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid match set ({} problems, first: {})", .0.len(), .0.first().map(|d| d.message.as_str()).unwrap_or(""))]
    Validation(Vec<Diagnostic>),

    #[error("need at least {need} point pairs, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("matrix is not an essential matrix (singular values {0:?})")]
    NotEssential([f64; 3]),

    #[error("no translation support: every decomposition candidate has zero points in front")]
    NoTranslationSupport,

    #[error("scene disconnected: largest connected component has {largest} images")]
    SceneDisconnected { largest: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("focal underdetermined: camera {0} has no fundamental-matrix pairs")]
    FocalUnderdetermined(usize),

    #[error("insufficient overlap: {0} common registered images, need at least 3")]
    InsufficientOverlap(usize),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
