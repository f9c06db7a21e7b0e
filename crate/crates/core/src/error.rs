use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("attack infeasible: {0}")]
    AttackInfeasible(String),

    #[error("attack failed: {0}")]
    AttackFailed(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Wraps this error with the name of the scenario that produced it.
    pub fn in_scenario(self, scenario: impl Into<String>) -> Self {
        Error::Scenario {
            scenario: scenario.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by invalid user input (bad config, missing or
    /// malformed files) rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Io { .. } => true,
            Error::Scenario { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
