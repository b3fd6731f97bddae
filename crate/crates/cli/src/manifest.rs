//! Run manifests, written into the output directory before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digests(paths: &[&Path]) -> CliResult<Vec<InputDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

impl RunManifest {
    pub fn new<C: Serialize>(
        subcommand: &str,
        seed: u64,
        config: &C,
        inputs: &[&Path],
        outputs: &[&str],
    ) -> CliResult<Self> {
        Ok(RunManifest {
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config).map_err(|e| CliError::Validation(e.to_string()))?,
            inputs: digests(inputs)?,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        prepare_out_dir(dir)?;
        let path = dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Validation(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
