use std::path::PathBuf;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] semcloak_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("config: {0}")]
    Toml(String),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: content hash {actual} does not match the recorded {expected}")]
    HashMismatch { path: PathBuf, expected: String, actual: String },

    #[error("{path}: expected a {expected} checkpoint, found {found}")]
    WrongKind { path: PathBuf, expected: String, found: String },

    #[error("no identity label for {0}")]
    MissingLabels(String),

    #[error("no images found under {0}")]
    EmptyDataset(PathBuf),

    #[error("stage {0} has no checkpoint and is not scheduled to train")]
    MissingCheckpoint(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
