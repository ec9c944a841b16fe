use thiserror::Error;

/// Errors produced by the alignment library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing reverse prediction ({src}, {tgt})")]
    MissingReverse { src: usize, tgt: usize },

    #[error("view graph is disconnected, components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("optimization diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("ground truth missing: {0}")]
    MissingGroundTruth(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl Error {
    /// Process exit code for a command-line stage failing with this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::InvalidState(_) | Error::Json { .. } => 2,
            Error::Disconnected { .. } | Error::MissingReverse { .. } | Error::Degenerate(_) => 3,
            Error::Diverged { .. } => 4,
            Error::MissingGroundTruth(_) => 5,
            Error::Io { .. } | Error::UndefinedCorrelation(_) => 1,
        }
    }
}
