use std::io;
use std::path::{Path, PathBuf};

/// Failures of a lab command, each mapped onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {}: {detail}", path.display())]
    Missing { path: PathBuf, detail: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("integrity check failed for {}: {detail}", path.display())]
    Integrity { path: PathBuf, detail: String },
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Core(#[from] mome_core::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Missing { .. } => 3,
            LabError::Numeric(_) => 4,
            LabError::Integrity { .. } => 5,
            LabError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 3,
            LabError::Io { .. } => 1,
            LabError::Core(mome_core::Error::Numeric(_)) => 4,
            LabError::Core(_) => 2,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            return LabError::Missing {
                path: path.to_path_buf(),
                detail: source.to_string(),
            };
        }
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn integrity(path: &Path, detail: impl Into<String>) -> Self {
        LabError::Integrity {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}
