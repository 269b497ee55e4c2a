use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the watermarking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding space mismatch: expected `{expected}`, got `{actual}`")]
    SpaceMismatch { expected: String, actual: String },

    #[error("model mismatch: expected `{expected}`, got `{actual}`")]
    ModelMismatch { expected: String, actual: String },

    #[error("embedding is not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("image shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid text sample: {0}")]
    InvalidText(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("unknown sample id `{0}`")]
    UnknownId(String),

    #[error("empty gallery")]
    EmptyGallery,

    #[error("ground-truth caption `{0}` is not in the gallery")]
    MissingGroundTruth(String),

    #[error("patch does not fit: {0}")]
    PatchOutOfBounds(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no trigger was accepted ({rejected} rejected)")]
    NoAcceptedTriggers { rejected: usize },

    #[error("threshold calibration failed: {0}")]
    Calibration(String),

    #[error("gradient check: {0}")]
    GradientCheck(String),

    #[error("not a forgery: {0}")]
    NotAForgery(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingArtifact(path);
        }
        Error::Io { path, source }
    }

    /// For writes: a missing directory is an I/O failure, not a missing input.
    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Writes `contents`, creating parent directories first.
pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::write(path, e))
}
