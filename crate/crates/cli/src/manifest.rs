//! Run manifest written next to every command's outputs. It holds no
//! timestamps, so replaying `argv` reproduces it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use mtvm::trainer::{config_hash, ExperimentConfig};

use crate::{write, CliResult, Failure, SEED_ENV};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub version: &'static str,
    /// Environment variables that changed the run.
    pub env: BTreeMap<String, String>,
    pub config_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.iter().skip(1).cloned().collect(),
            version: env!("CARGO_PKG_VERSION"),
            env: std::env::var(SEED_ENV).into_iter().map(|v| (SEED_ENV.to_string(), v)).collect(),
            config_hashes: BTreeMap::new(),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    /// Records the experiment hash and its seeds.
    pub fn config(&mut self, cfg: &ExperimentConfig) {
        self.hash_value("experiment", &cfg.hash());
        self.seed("trainer", cfg.trainer.seed);
        self.seed("data", cfg.data.seed);
    }

    pub fn hash(&mut self, name: &str, text: &str) {
        self.hash_value(name, &config_hash(text));
    }

    pub fn hash_value(&mut self, name: &str, hash: &str) {
        self.config_hashes.insert(name.to_string(), hash.to_string());
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn artifact(&mut self, path: String) {
        self.artifacts.push(path);
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| Failure::Internal(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> CliResult {
        write(&dir.join(MANIFEST_FILE), &self.to_json()?)?;
        Ok(())
    }
}
