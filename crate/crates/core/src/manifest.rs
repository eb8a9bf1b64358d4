//! The record every CLI run writes beside its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Crate version plus `git describe` of the build.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CMR_GIT_DESCRIBE"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The fully resolved command with every flag, replayable as is.
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: VERSION.to_string(),
            outputs,
        }
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Io(e.into()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DataError::Json {
            path: path.display().to_string(),
            line: e.line(),
            source: e,
        })
    }
}
