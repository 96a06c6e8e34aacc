use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis error: {0}")]
    Axis(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {file}: field `{field}`: {message}")]
    Parse {
        file: String,
        field: String,
        message: String,
    },

    #[error("consistency error in case `{case}`: {message}")]
    Consistency { case: String, message: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    /// Short stable identifier, used in machine-readable CLI failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Axis(_) => "axis",
            Error::Contract(_) => "contract",
            Error::Value(_) => "value",
            Error::Index(_) => "index",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non_finite",
            Error::Capacity(_) => "capacity",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Consistency { .. } => "consistency",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        file: impl std::fmt::Display,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            file: file.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }
}
