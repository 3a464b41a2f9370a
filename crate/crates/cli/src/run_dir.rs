use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smagnet::checkpoint::{load_checkpoint, LoadedCheckpoint};
use smagnet::fsx::{read_json, write_atomic, write_json};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Provenance record kept next to the artifacts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Checksum of the dataset manifest and normalization stats used.
    pub dataset_sha256: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Artifact file name → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// A directory holding one trained model and everything derived from it.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: &Path) -> Self {
        Self { path: path.to_path_buf() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn config(&self) -> Result<RunConfig> {
        let path = self.file(CONFIG_FILE);
        if !path.exists() {
            return Err(CliError::data(format!("{} is not a run directory (no {CONFIG_FILE})", self.path.display())));
        }
        RunConfig::load(&path)
    }

    pub fn record(&self) -> Result<RunRecord> {
        Ok(read_json(&self.file(RUN_FILE))?)
    }

    pub fn checkpoint(&self) -> Result<LoadedCheckpoint> {
        Ok(load_checkpoint(&self.file(CHECKPOINT_FILE))?)
    }

    /// Writes an artifact atomically and records its checksum.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.file(name), bytes)?;
        self.register(name, bytes)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.file(name), value)?;
        let bytes = std::fs::read(self.file(name)).map_err(|e| CliError::data(format!("{name}: {e}")))?;
        self.register(name, &bytes)
    }

    pub fn register(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut record = self.record().unwrap_or_default();
        record.artifacts.insert(name.to_string(), sha256_hex(bytes));
        self.save_record(&record)
    }

    pub fn save_record(&self, record: &RunRecord) -> Result<()> {
        Ok(write_json(&self.file(RUN_FILE), record)?)
    }
}
