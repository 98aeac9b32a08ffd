//! Run provenance: every command writes exactly one manifest describing the
//! command, its resolved configuration, inputs, outputs, and timings.

use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub dataset: Option<String>,
    pub output: String,
    pub seed: Option<u64>,
    pub wall_ms: u128,
}

pub struct ManifestBuilder {
    command: String,
    config: BTreeMap<String, String>,
    dataset: Option<String>,
    seed: Option<u64>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: BTreeMap::new(),
            dataset: None,
            seed: None,
            started: Instant::now(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn dataset(&mut self, path: &Path) -> &mut Self {
        self.dataset = Some(path.display().to_string());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn write(self, out_dir: &Path) -> Result<(), String> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            dataset: self.dataset,
            output: out_dir.display().to_string(),
            seed: self.seed,
            wall_ms: self.started.elapsed().as_millis(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| format!("manifest serialization: {e}"))?;
        std::fs::write(out_dir.join("manifest.json"), text)
            .map_err(|e| format!("writing manifest: {e}"))
    }
}
