use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid format: {0}")]
    Format(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("degenerate pose: all keypoints coincide")]
    DegeneratePose,
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("batchnorm running statistics not initialized for '{0}'")]
    Uninitialized(String),
    #[error("training diverged for head '{head}' at step {step}: non-finite loss")]
    Divergence { head: String, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIM",
            Error::Contract(_) => "E_CONTRACT",
            Error::Input(_) => "E_INPUT",
            Error::Format(_) => "E_FORMAT",
            Error::NotFound(_) => "E_NOT_FOUND",
            Error::DegeneratePose => "E_DEGENERATE",
            Error::MetricUndefined(_) => "E_METRIC",
            Error::Config(_) => "E_CONFIG",
            Error::State(_) => "E_STATE",
            Error::Uninitialized(_) => "E_UNINIT",
            Error::Divergence { .. } => "E_DIVERGED",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Image(_) => "E_IMAGE",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::NotFound(path.display().to_string());
        }
        Error::Io { path, source }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
