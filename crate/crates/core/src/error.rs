use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside of [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    #[error("model domain violated at t = {t}: {reason}")]
    Domain { t: f64, reason: String },

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("scenario {index}: {source}")]
    Scenario {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    Dependency { path: PathBuf, stage: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Coarse failure class, used to pick the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Dependency,
    Numerical,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Dependency => 3,
            Category::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Dependency => "dependency",
            Category::Numerical => "numerical",
        }
    }
}

impl Error {
    pub fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn dimension(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Invalid { .. } => Category::Config,
            Error::Dependency { .. } => Category::Dependency,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Category::Dependency
            }
            Error::Io { .. } => Category::Config,
            Error::Scenario { source, .. } => source.category(),
            _ => Category::Numerical,
        }
    }
}
