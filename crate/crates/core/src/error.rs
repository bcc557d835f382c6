use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick a stable exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}, field `{field}`: {message}")]
    Record {
        path: PathBuf,
        row: usize,
        field: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Record { .. }
            | Error::Invalid(_)
            | Error::Degenerate(_)
            | Error::Json { .. }
            | Error::Toml { .. } => ErrorClass::Validation,
            Error::Csv { source, .. } => {
                if source.is_io_error() {
                    ErrorClass::Io
                } else {
                    ErrorClass::Validation
                }
            }
            Error::Image { source, .. } => match source {
                image::ImageError::IoError(_) => ErrorClass::Io,
                _ => ErrorClass::Validation,
            },
            Error::Io { .. } => ErrorClass::Io,
            Error::Numerical(_) => ErrorClass::Numerical,
        }
    }
}
