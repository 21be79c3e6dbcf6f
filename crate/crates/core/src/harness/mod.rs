//! Experiment driver: toy backbone pretraining, late/early probing
//! benchmarks, part-model training and report aggregation.
//!
//! Every run writes under `<out>/seed_<s>/`: `pretrain/` (backbone checkpoint
//! and loss log), `benchmark/` and one directory per trained variant, each
//! holding a `run.json` provenance record and, except `pretrain/`, a
//! `metrics.csv`. [`make_report`] aggregates the `metrics.csv` files into
//! `<out>/report/`.

mod benchmark;
pub mod commands;
mod model;
mod pretrain;
mod report;

pub use benchmark::{benchmark_with_masks, part_features, probe_logits, run_benchmark, BenchmarkReport, Masking, MaskingResult};
pub use model::{evaluate_model, train_model, ModelReport, SampleEval};
pub use pretrain::{cls_logits, pretrain_backbone, PretrainConfig, PretrainLog};
pub use report::{make_report, summarize, SummaryRow, REPORT_DIR, SUMMARY_METRICS};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{KStar, ProbeConfig};
use crate::partmodel::{LossConfig, Mode, TrainConfig};
use crate::synth::{generate, read_dataset, Dataset, DatasetSpec};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Read the dataset from here instead of generating it from `dataset`.
    pub data_dir: Option<PathBuf>,
    pub vit: ViTConfig,
    /// Discovered parts `K`.
    pub parts: usize,
    pub loss: LossConfig,
    pub variant: Mode,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    /// Contingency threshold for assigning discovered to ground-truth parts.
    pub tau: f64,
    pub kstar: KStar,
    pub seeds: Vec<u64>,
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            data_dir: None,
            vit: ViTConfig::default(),
            parts: 4,
            loss: LossConfig::default(),
            variant: Mode::Ste,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            tau: 0.25,
            kstar: KStar::PerSample,
            seeds: vec![0, 1, 2],
            exec: Exec::Parallel,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.dataset.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.parts == 0 {
            return Err(Error::Config("parts must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.vit.channels != 3
            || self.vit.image_size != self.dataset.image_size
            || self.vit.patch_size != self.dataset.patch_size
        {
            return Err(Error::Config(format!(
                "model expects {}-channel {}px images with patch {}, dataset has 3-channel {}px with patch {}",
                self.vit.channels,
                self.vit.image_size,
                self.vit.patch_size,
                self.dataset.image_size,
                self.dataset.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The configured dataset, read from `data_dir` or generated.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.data_dir {
            Some(dir) => read_dataset(dir)?,
            None => generate(&self.dataset)?,
        };
        if ds.spec.image_size != self.vit.image_size || ds.spec.patch_size != self.vit.patch_size {
            return Err(Error::Config("dataset geometry does not match the model".into()));
        }
        Ok(ds)
    }
}

/// Provenance written next to every artifact set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            seed,
            config_hash: config.hash(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join("run.json"), text)?;
        Ok(())
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Row-wise mean of boolean masks: the fraction of cells each part covers,
/// averaged over samples.
pub fn mask_area(masks: &[Vec<Vec<bool>>]) -> Vec<f64> {
    let parts = masks.first().map_or(0, Vec::len);
    (0..parts)
        .map(|k| {
            masks.iter().map(|m| m[k].iter().filter(|&&b| b).count() as f64 / m[k].len() as f64).sum::<f64>()
                / masks.len() as f64
        })
        .collect()
}
