use thiserror::Error;

/// Every failure the library reports.
///
/// Variants map onto the distinct failure classes a test report has to keep
/// apart: a misconfigured suite is not the same thing as an estimator that
/// produced garbage, and neither is a failed acceptance check.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid model state: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("estimator fault: {0}")]
    EstimatorFault(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("specification error: {0}")]
    Spec(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the suite description rather than by running it.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Structural(_) | Error::Spec(_) | Error::Io { .. }
        )
    }
}
