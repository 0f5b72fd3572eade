use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use phs_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub test_fraction: f64,
}

/// Provenance record written once into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub dataset_fingerprint: Option<String>,
    pub dataset_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub started_at: u64,
    pub finished_at: u64,
    pub elapsed_seconds: f64,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            dataset_fingerprint: None,
            dataset_path: None,
            split: None,
            started_at: unix_now(),
            finished_at: 0,
            elapsed_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn write(&mut self, dir: &Path, elapsed_seconds: f64) -> Result<()> {
        self.finished_at = unix_now();
        self.elapsed_seconds = elapsed_seconds;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset { path, detail: format!("not a run manifest: {e}") })
    }
}
