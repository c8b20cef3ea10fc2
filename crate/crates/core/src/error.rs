use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported architecture `{0}`")]
    UnsupportedArch(String),
    #[error("class {class} has {available} candidate seeds, {needed} requested")]
    InsufficientData { class: usize, needed: usize, available: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Synthesis produced a non-finite loss; carries the last finite images.
    #[error("synthesis diverged at iteration {iteration}")]
    Diverged { iteration: usize, last_finite: Box<Vec<crate::data::SyntheticRecord>> },
    #[error("curriculum {index}: {source}")]
    Curriculum {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_curriculum(self, index: usize) -> Self {
        match self {
            e @ Error::Curriculum { .. } => e,
            e => Error::Curriculum { index, source: Box::new(e) },
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Config(_) | Error::UnsupportedArch(_) | Error::Format(_) | Error::Validation(_) => true,
            Error::Curriculum { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
