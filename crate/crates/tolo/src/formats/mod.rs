//! On-disk formats: TOLOGRID grids, PGM exports, PPM images.

pub mod pgm;
pub mod ppm;
pub mod tolog;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

impl FormatError {
    pub(crate) fn malformed(path: &std::path::Path, reason: impl Into<String>) -> Self {
        FormatError::Malformed {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}
