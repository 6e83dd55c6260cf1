//! Sidecar manifests: `<artifact>.manifest.json` next to every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use persona_core::dataset::manifest_path;
use persona_core::schema::SCHEMA_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub schema_version: u32,
    pub seed: u64,
    /// Input name to SHA-256 of the file bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub details: Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            schema_version: SCHEMA_VERSION,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: Value::Null,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(name.into(), file_sha(path)?);
        Ok(self)
    }

    pub fn output(mut self, name: &str, path: &Path) -> Result<Self> {
        self.outputs.insert(name.into(), file_sha(path)?);
        Ok(self)
    }

    pub fn details(mut self, details: impl Serialize) -> Self {
        self.details = serde_json::to_value(details).expect("details serialize");
        self
    }

    /// Writes the sidecar of `artifact` and returns its path.
    pub fn write_for(&self, artifact: &Path) -> Result<PathBuf> {
        let path = manifest_path(artifact);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}
