//! Run bookkeeping: what was trained on which data, and every score taken.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// One evaluation, tied to the checkpoint and dataset it scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub step: usize,
    pub split: String,
    pub checkpoint: PathBuf,
    pub dataset_hash: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub dataset_hash: String,
    pub checkpoint: PathBuf,
    pub metric_history: Vec<MetricEntry>,
}

impl RunManifest {
    pub fn new(config: ModelConfig, seed: u64, dataset_hash: String, checkpoint: PathBuf) -> Self {
        Self {
            config,
            seed,
            dataset_hash,
            checkpoint,
            metric_history: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn record(&mut self, entry: MetricEntry) {
        self.metric_history.push(entry);
    }
}
