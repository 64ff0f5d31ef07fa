use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed taxonomy (duplicate ids, conflicting parents, empty input).
    #[error("taxonomy structure: {0}")]
    Structural(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration: {0}")]
    Config(String),

    /// A sampling request that the dataset cannot satisfy.
    #[error("data: {0}")]
    Data(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("holdout split: class {class} has {count} example(s), need at least 2")]
    Split { class: u32, count: usize },

    #[error("run directory {0} already exists (pass --overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("incomplete run directory {dir}: missing {missing}")]
    IncompleteRun { dir: PathBuf, missing: String },

    #[error("unknown configuration key `{key}` on line {line}")]
    UnknownKey { key: String, line: usize },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than by
    /// a failure during execution. The CLI maps these to exit code 1.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Structural(_)
                | Error::UnknownKey { .. }
                | Error::Parse { .. }
                | Error::OutputExists(_)
        )
    }
}
