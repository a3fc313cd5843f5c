//! Small-scale multimodal span extraction: a prompt-as-dual-query encoder over
//! frozen image features, matching/contrastive pretraining objectives, and an
//! energy-based pairwise span head, all on a from-scratch f64 autodiff graph.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod epe;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;

use std::path::PathBuf;

/// Library-level error for contract, configuration, and I/O failures.
/// Tensor shape violations panic instead; they are programming errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}:{line}: malformed field `{field}`: {message}")]
    Parse { path: String, line: usize, field: String, message: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config { field: field.to_string(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Writes a file through a temporary sibling and an atomic rename, so
/// repeated runs either fully replace an output or leave the old one intact.
pub fn write_atomic(path: &std::path::Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
