use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes. The CLI maps each class to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Validation,
    Transport,
    Policy,
    OverBudget,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("yaml parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("grid has {count} points, exceeding the cap of {cap}")]
    GridTooLarge { count: u128, cap: usize },

    #[error("undefined variable `{0}`")]
    UndefinedVariable(String),

    #[error("variable `{0}` resolves to a collection, not a scalar")]
    NotAScalar(String),

    #[error("variable `{0}` expands recursively beyond the nesting limit")]
    RecursionLimit(String),

    #[error("unbalanced `{{` at byte offset {offset}")]
    Scan { offset: usize },

    #[error("cannot render `{path}` at line {line}, column {column}: {reason}")]
    Render {
        path: String,
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("experiment id `{id}` is shared by points {first} and {second}")]
    IdCollision {
        id: String,
        first: String,
        second: String,
    },

    #[error("{path} already exists with different content; use --force to overwrite")]
    Exists { path: PathBuf },

    #[error("submission failed: {0}")]
    Submit(String),

    #[error("policy violation: {0}")]
    Policy(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("workflow contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("timer `{0}` was never started")]
    TimerNotStarted(String),

    #[error("sampler `{0}` not found")]
    SamplerMissing(String),

    #[error("schema violation: missing or invalid fields: {}", .0.join(", "))]
    Schema(Vec<String>),

    #[error("record with guid {0} already exists")]
    DuplicateGuid(String),

    #[error("repository {path} is locked by another writer")]
    Locked { path: PathBuf },

    #[error("over budget: projected {projected} exceeds limit {limit}")]
    OverBudget { projected: String, limit: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        // not marked as the source: the message already carries it
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::GridTooLarge { .. }
            | Error::UndefinedVariable(_)
            | Error::NotAScalar(_)
            | Error::RecursionLimit(_)
            | Error::Scan { .. }
            | Error::Render { .. }
            | Error::IdCollision { .. }
            | Error::Exists { .. }
            | Error::Cycle(_)
            | Error::TimerNotStarted(_)
            | Error::Schema(_)
            | Error::DuplicateGuid(_) => ErrorClass::Validation,
            Error::Transport(_) | Error::Submit(_) => ErrorClass::Transport,
            Error::Policy(_) => ErrorClass::Policy,
            Error::OverBudget { .. } => ErrorClass::OverBudget,
            Error::SamplerMissing(_) => ErrorClass::Usage,
            Error::Locked { .. } | Error::Io { .. } | Error::Serialize(_) => ErrorClass::Other,
        }
    }
}

impl From<serde_yaml::Error> for Error {
    fn from(err: serde_yaml::Error) -> Self {
        let (line, column) = err
            .location()
            .map(|l| (l.line(), l.column()))
            .unwrap_or((0, 0));
        Error::Parse {
            line,
            column,
            message: err.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialize(err.to_string())
    }
}
