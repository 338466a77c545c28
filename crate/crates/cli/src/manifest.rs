use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// What a command read and wrote.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Bytes identifying the effective configuration.
    pub config: Vec<u8>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of the effective configuration, hex.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub duration_secs: f64,
}

pub fn check_outputs(outputs: &[PathBuf]) -> anyhow::Result<()> {
    for path in outputs {
        if !path.is_file() {
            bail!("declared output {} was not written", path.display());
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, outcome: Outcome, duration: Duration) -> Self {
        Self {
            command: command.to_string(),
            inputs: outcome.inputs,
            outputs: outcome.outputs,
            config_digest: hex::encode(Sha256::digest(&outcome.config)),
            seed: outcome.seed,
            duration_secs: duration.as_secs_f64(),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        check_outputs(&self.outputs)?;
        fanbeam_core::io::write_json(path, self)
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}
