//! Run manifests: a full snapshot of everything a guide run consumed, plus
//! checksums of everything it wrote, sufficient to re-execute the run
//! bit-identically and verify the artifacts.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tolo_core::attention::EngineConfig;
use tolo_core::layout::Layout;
use tolo_core::losses::LossWeights;
use tolo_core::schedule::{GuidanceConfig, ResolvedMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub layout: Layout,
    pub engine: EngineConfig,
    pub weights: LossWeights,
    pub guidance: GuidanceConfig,
    pub resolved_mode: ResolvedMode,
    pub dump_maps: bool,
    pub outputs: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Write bytes to `path` atomically: temp file in the same directory, then
/// rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    atomic_write(path, json.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, super::commands::CliError> {
    let text = fs::read_to_string(path).map_err(super::commands::CliError::from)?;
    serde_json::from_str(&text).map_err(|e| {
        super::commands::CliError::Format(format!("{}: {e}", path.display()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        // No temp litter.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
