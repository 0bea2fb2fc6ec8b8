use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] srwgan_core::error::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{}: sha256 mismatch (manifest {expected}, file {found})", path.display())]
    Checksum { path: PathBuf, expected: String, found: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    /// Stable identifier used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(srwgan_core::error::Error::NonFinite(_)) => "non_finite",
            Error::Core(srwgan_core::error::Error::InvalidConfig(_)) => "invalid_config",
            Error::Core(srwgan_core::error::Error::InvalidDataset(_)) => "invalid_dataset",
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Checksum { .. } => "checksum",
            Error::Manifest(_) => "manifest",
            Error::Config(_) => "invalid_config",
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
    let path = path.into();
    move |source| Error::Json { path, source }
}
