use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything that determines a command's outputs. The output directory
/// name is derived from this, so identical inputs land in the same place.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_sha256: String,
    pub params_sha256: Option<String>,
    pub policies: Vec<String>,
    pub scales: Vec<String>,
    pub seeds: Vec<u64>,
    pub options: BTreeMap<String, String>,
    pub output_dir: String,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    command: &'a str,
    config_sha256: &'a str,
    params_sha256: &'a Option<String>,
    policies: &'a [String],
    scales: &'a [String],
    seeds: &'a [u64],
    options: &'a BTreeMap<String, String>,
}

impl RunManifest {
    /// Hash over the inputs only; the config path and output root are left
    /// out so moving files around does not change the layout.
    pub fn hash(&self) -> String {
        let part = HashedPart {
            command: &self.command,
            config_sha256: &self.config_sha256,
            params_sha256: &self.params_sha256,
            policies: &self.policies,
            scales: &self.scales,
            seeds: &self.seeds,
            options: &self.options,
        };
        let text = serde_json::to_string(&part).expect("manifest serializes");
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    /// Creates `<root>/<hash>/` and writes `manifest.json` into it.
    pub fn materialize(&mut self, root: &Path) -> Result<PathBuf, CliError> {
        let dir = root.join(self.hash());
        self.output_dir = dir.display().to_string();
        create_dir(&dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write(&dir.join("manifest.json"), text.as_bytes())?;
        Ok(dir)
    }
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn run_stem(policy: &str, scale: &str, seed: u64) -> String {
    format!("{policy}_{scale}_{seed}")
}
