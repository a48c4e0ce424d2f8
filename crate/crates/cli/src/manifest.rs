//! Run manifests: what produced an output directory, and the digests of
//! every file in it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use captta::digest::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    pub system: String,
    /// Artifact name to sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    /// Artifact name to the path it was read from.
    pub artifact_paths: BTreeMap<String, PathBuf>,
    /// Output file name to sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid manifest {}: {e}", path.display())))
    }

    /// Recomputes the digest of every listed output; exit code 3 on mismatch.
    pub fn verify_outputs(&self, dir: &Path) -> Result<(), CliError> {
        for (name, expected) in &self.outputs {
            let found = file_digest(&dir.join(name))?;
            if &found != expected {
                return Err(CliError::digest(format!(
                    "{} changed since the run: expected {expected}, found {found}",
                    dir.join(name).display()
                )));
            }
        }
        Ok(())
    }

    /// Recomputes digests of artifacts still present at their recorded
    /// paths; exit code 3 on mismatch.
    pub fn verify_artifacts(&self) -> Result<(), CliError> {
        for (name, expected) in &self.artifacts {
            if let Some(p) = self.artifact_paths.get(name).filter(|p| p.is_file()) {
                if &file_digest(p)? != expected {
                    return Err(CliError::digest(format!(
                        "artifact `{name}` at {} differs from the manifest",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}
