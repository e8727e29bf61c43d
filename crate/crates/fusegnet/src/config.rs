//! Run configuration: one versioned TOML document aggregating every knob.
//! Unknown keys are rejected and every section is validated on load.

use crate::augment::AugmentationPlan;
use crate::dataio::PreprocessSettings;
use crate::error::{Error, Result};
use crate::losses::LossSettings;
use crate::metrics::CategorySpec;
use crate::network::NetworkConfig;
use crate::trainer::TrainSettings;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldsSection {
    pub k: usize,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

/// Training knobs as they appear in the config file. The seed is global, so
/// this section deliberately has no seed key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub holdout_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainSettings::default();
        TrainSection {
            initial_lr: d.initial_lr,
            weight_decay: d.weight_decay,
            plateau_factor: d.plateau_factor,
            plateau_patience: d.plateau_patience,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            early_stop_patience: d.early_stop_patience,
            holdout_fraction: d.holdout_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub output: Option<OutputSection>,
    #[serde(default)]
    pub folds: Option<FoldsSection>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentationPlan,
    #[serde(default)]
    pub categories: CategorySpec,
    #[serde(default)]
    pub preprocess: PreprocessSettings,
}

fn default_seed() -> u64 {
    42
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: default_seed(),
            dataset: None,
            output: None,
            folds: None,
            network: NetworkConfig::default(),
            loss: LossSettings::default(),
            train: TrainSection::default(),
            augment: AugmentationPlan::default(),
            categories: CategorySpec::default(),
            preprocess: PreprocessSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.train_settings().validate()?;
        self.augment.validate()?;
        self.categories.validate()?;
        self.preprocess.validate()?;
        if let Some(folds) = &self.folds {
            if folds.k < 2 {
                return Err(Error::Config("folds.k must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Run-ready training settings under the global seed.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            initial_lr: self.train.initial_lr,
            weight_decay: self.train.weight_decay,
            plateau_factor: self.train.plateau_factor,
            plateau_patience: self.train.plateau_patience,
            max_epochs: self.train.max_epochs,
            batch_size: self.train.batch_size,
            early_stop_patience: self.train.early_stop_patience,
            seed: self.seed,
            holdout_fraction: self.train.holdout_fraction,
        }
    }

    pub fn fold_seed(&self) -> u64 {
        self.folds.as_ref().and_then(|f| f.seed).unwrap_or(self.seed)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_required(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [dataset] section".into()))
    }

    pub fn output_dir(&self, override_dir: Option<&Path>) -> Result<PathBuf> {
        if let Some(dir) = override_dir {
            return Ok(dir.to_path_buf());
        }
        self.output
            .as_ref()
            .map(|o| o.dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set [output] dir".into()))
    }
}
