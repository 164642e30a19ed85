//! Per-command run manifests.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub pf_train: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub config_hash: String,
    pub deterministic: bool,
    /// Left out in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
    pub seeds: Seeds,
    pub artifacts: Vec<Artifact>,
    pub config: ExperimentConfig,
}

pub fn file_sha256(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn new(
        command: &str,
        cfg: &ExperimentConfig,
        out_dir: &Path,
        artifacts: &[String],
        elapsed: f64,
    ) -> Result<Self> {
        let artifacts = artifacts
            .iter()
            .map(|a| {
                let (sha256, bytes) = file_sha256(&out_dir.join(a))?;
                Ok(Artifact {
                    path: a.clone(),
                    sha256,
                    bytes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash()?,
            deterministic: cfg.deterministic,
            elapsed_seconds: (!cfg.deterministic).then_some(elapsed),
            seeds: Seeds {
                data: cfg.seed,
                train: cfg.train.seed,
                pf_train: cfg.pf.train.seed,
            },
            artifacts,
            config: cfg.clone(),
        })
    }

    /// Writes `manifest-<command>.toml` into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(out_dir.join(format!("manifest-{}.toml", self.command)), text)?;
        Ok(())
    }
}
