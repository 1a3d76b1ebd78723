use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),

    #[error("parse error in {context} at line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
        /// Raw text that failed to parse, when it came from an external source.
        payload: Option<String>,
    },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("{0}")]
    Range(String),

    #[error("template: {0}")]
    Template(String),

    #[error("interpreter: {0}")]
    Interpreter(String),

    #[error("no compatible lane for agent {agent}: {reason}")]
    NoCompatibleLane { agent: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("simulation of scenario {scenario}: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training: {0}")]
    Training(String),

    #[error("config: {0}")]
    Config(String),

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

    pub(crate) fn json(context: impl Into<String>, e: &serde_json::Error) -> Self {
        Error::Parse {
            context: context.into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
            payload: None,
        }
    }

    /// True for errors caused by bad input data rather than a bug.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Training(_))
    }
}
