//! Subcommand implementations and the shared error-to-exit-code mapping.

pub mod grad_check;
pub mod guide;
pub mod loss_eval;
pub mod partition;
pub mod score;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::formats::FormatError;
use tolo_core::schedule::RunError;

/// Stable exit codes: scripts depend on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Io = 1,
    Format = 2,
    Numeric = 3,
    Usage = 64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::Usage,
            CliError::Io(_) => ExitCode::Io,
            CliError::Format(_) => ExitCode::Format,
            CliError::Numeric(_) => ExitCode::Numeric,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(io) => CliError::Io(io.to_string()),
            malformed => CliError::Format(malformed.to_string()),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Format(other.to_string()),
        }
    }
}

/// Read a JSON-lines file, one record per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| {
            CliError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Serialize records as JSON lines, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("serializable record"));
        buf.push('\n');
    }
    crate::manifest::atomic_write(path, buf.as_bytes())?;
    Ok(())
}

/// Pretty JSON written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("serializable value");
    crate::manifest::atomic_write(path, json.as_bytes())?;
    Ok(())
}

/// Parse an optional JSON config file into its default when absent.
pub fn load_config_or_default<T: DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Format(format!("{}: {e}", p.display())))
        }
    }
}
