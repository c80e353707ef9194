use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one run: inputs, seeds and a digest of every output file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub config: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Option<&Path>) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            derived_seeds: BTreeMap::new(),
            config: config.map(Path::to_path_buf),
            config_sha256: config.map(sha256_file).transpose()?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn seed(&mut self, name: &str) -> u64 {
        let s = eyephen::seeds::derive(self.seed, name);
        self.derived_seeds.insert(name.to_string(), s);
        s
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    /// Records an output by its path relative to `out`.
    pub fn output(&mut self, out: &Path, path: &Path) -> Result<()> {
        let d = sha256_file(path)?;
        let rel = path.strip_prefix(out).unwrap_or(path);
        self.outputs.insert(rel.display().to_string(), d);
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
