//! Config-driven training, evaluation, and the paired trend study.

mod loader;
mod optim;
mod train;
mod trend;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segcore::{LossBundle, SegLossConfig, UNetConfig};

pub use loader::{InstrumentedLoader, LoadedSample};
pub use optim::{Adam, OptimConfig, ScheduleKind};
pub use train::{
    evaluate, evaluate_samples, evaluate_split, load_trained_model, train, train_full,
    TrainedModel,
};
pub use trend::{run_trend_study, SeedTrend, TrendArm, TrendSummary};

/// Environment variable consulted when a config omits `data_dir`.
pub const DATA_DIR_ENV: &str = "TGCFA_DATA_DIR";

/// Alignment-loss settings of a training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignSettings {
    pub enabled: bool,
    pub neg_margin: f64,
    pub mean_over_cells: bool,
    /// Weight on the alignment term in the total objective.
    pub lambda: f64,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            neg_margin: 0.0,
            mean_over_cells: true,
            lambda: 1.0,
        }
    }
}

/// Everything a training run depends on. The seed fully determines
/// initialization and data order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset root; falls back to `TGCFA_DATA_DIR` when unset.
    pub data_dir: Option<PathBuf>,
    /// Embedding table produced by `embed-text`.
    pub table_path: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Label treated as background in Dice reporting.
    pub background_id: Option<usize>,
    pub backbone: UNetConfig,
    pub optimizer: OptimConfig,
    pub align: AlignSettings,
    pub seg_loss: SegLossConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            table_path: PathBuf::new(),
            epochs: 30,
            batch_size: 8,
            seed: 0,
            background_id: Some(0),
            backbone: UNetConfig::default(),
            optimizer: OptimConfig::default(),
            align: AlignSettings::default(),
            seg_loss: SegLossConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("config serialization failed: {e}")))
    }

    /// Resolves the dataset root from the config or the environment.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "no data_dir in config and {DATA_DIR_ENV} is unset"
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.align.neg_margin) {
            return Err(Error::Validation(format!(
                "neg_margin {} outside [-1, 1]",
                self.align.neg_margin
            )));
        }
        if self.table_path.as_os_str().is_empty() {
            return Err(Error::Validation(
                "table_path is required (run embed-text first)".into(),
            ));
        }
        if let Some(bg) = self.background_id {
            if bg >= self.backbone.num_classes {
                return Err(Error::Validation(format!(
                    "background_id {bg} >= num_classes {}",
                    self.backbone.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Stable hash of the serialized config.
    pub fn config_hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in text.as_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}

/// Aggregates logged for one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-mean losses; the bundle equalities hold exactly.
    pub mean_loss: LossBundle,
    /// Source-validation mean foreground Dice.
    pub val_dice: f64,
}

/// Everything observable about one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub align_enabled: bool,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// File reads by "split/domain", from the instrumented loader.
    pub read_counts: BTreeMap<String, usize>,
    /// Alignment cells skipped for degeneracy over the whole run.
    pub skipped_alignment_cells: usize,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("run record serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }
}
