//! Run manifests: configuration snapshot, seed and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Result;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of the compact JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

/// Everything needed to reproduce a command's outputs. Wall-clock time is
/// kept in a separate timing file so that the manifest itself is
/// reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            notes: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let h = if path.is_dir() {
            "directory".to_string()
        } else {
            hash_file(path)?
        };
        self.inputs.insert(name.into(), h);
        Ok(())
    }

    /// Records `dir/rel` under its relative path.
    pub fn add_artifact(&mut self, dir: &Path, rel: &str) -> Result<()> {
        self.artifacts.insert(rel.into(), hash_file(&dir.join(rel))?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.notes.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

pub fn write_timing(dir: &Path, command: &str, seconds: f64) -> Result<()> {
    let v = serde_json::json!({ "command": command, "wall_clock_seconds": seconds });
    fs::write(dir.join(TIMING_FILE), serde_json::to_string_pretty(&v)?)?;
    Ok(())
}
