//! Experiment configuration: one JSON file describing the dataset, the
//! training run and (optionally) the joint feature-change run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_toy, generate_toy_blobs, Dataset, ToyKind};
use crate::error::{Error, Result};
use crate::metrics::ProbeConfig;
use crate::trainer::{JointConfig, TrainConfig};

fn default_noise() -> f64 {
    0.2
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Which toy dataset to generate and how to split it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: ToyKind,
    pub n: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Blob count for `gaussian_blobs`; ignored otherwise.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetConfig {
    /// Generates the full dataset, before splitting.
    pub fn generate(&self) -> Result<Dataset> {
        match (self.kind, self.classes) {
            (ToyKind::GaussianBlobs, Some(c)) => {
                generate_toy_blobs(self.n, self.noise, self.seed, c)
            }
            _ => generate_toy(self.kind, self.n, self.noise, self.seed),
        }
    }

    /// Generates the dataset and splits it into (train, test).
    pub fn realize(&self) -> Result<(Dataset, Dataset)> {
        self.generate()?.split(self.train_fraction, self.seed)
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Top-level experiment description loaded from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Present only for `feature-change` runs.
    #[serde(default)]
    pub joint: Option<JointConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    /// All artifacts land under this directory; `--out` overrides it.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n < 4 {
            return Err(Error::Config(format!(
                "dataset.n {} is too small",
                self.dataset.n
            )));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must be in (0, 1)",
                self.dataset.train_fraction
            )));
        }
        self.train.graph.validate()?;
        Ok(())
    }

    /// Applies the `--seed` override to every seeded component.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        if let Some(joint) = self.joint.as_mut() {
            joint.seed = seed;
        }
        if let Some(probe) = self.probe.as_mut() {
            probe.seed = seed;
        }
        if let Some(ransac) = self.train.ransac.as_mut() {
            ransac.seed = seed;
        }
    }
}
