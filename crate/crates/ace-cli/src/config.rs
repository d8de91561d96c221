//! Declarative experiment configuration and the named training presets.
//!
//! A config file is TOML with fixed sections; unknown keys anywhere are hard
//! errors so typos never silently fall back to defaults. Presets carry the
//! per-dataset training defaults; suites override only what the experiment
//! design demands (scheduling off, selection mode, bound overrides).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ace_core::data::{dominoes_config, toy_grid_config, DatasetConfig, SplitSizes};
use ace_core::nn::OptimizerConfig;
use ace_core::objectives::MixRateConfig;
use ace_core::trainer::{EarlyStopping, Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: Option<DataSection>,
    #[serde(default)]
    pub run: RunSection,
    pub train: Option<TrainSection>,
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(data) = &self.data {
            data.validate()?;
        }
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataSection> {
        self.data
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config needs a [data] section for this command"))
    }

    /// The resolved copy written into every results directory.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "toygrid" or "dominoes".
    pub dataset: String,
    #[serde(default = "default_mix_rates")]
    pub mix_rates: Vec<f64>,
    /// Source disagreement rates for the incomplete-correlation suite.
    #[serde(default)]
    pub incomplete_rates: Vec<f64>,
    #[serde(default = "default_source_train")]
    pub source_train: usize,
    #[serde(default = "default_source_val")]
    pub source_val: usize,
    #[serde(default = "default_target_train")]
    pub target_train: usize,
    #[serde(default = "default_target_val")]
    pub target_val: usize,
    #[serde(default = "default_test")]
    pub test: usize,
    /// Dominoes only: fraction of disagreement mass on group (0,1).
    #[serde(default = "default_conflict_ratio")]
    pub conflict_ratio: f64,
    /// Dominoes only: margin gap scale for the hard block.
    #[serde(default = "default_gap")]
    pub gap: f64,
}

fn default_mix_rates() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 0.75, 1.0]
}
fn default_source_train() -> usize {
    1024
}
fn default_source_val() -> usize {
    512
}
fn default_target_train() -> usize {
    2048
}
fn default_target_val() -> usize {
    512
}
fn default_test() -> usize {
    2048
}
fn default_conflict_ratio() -> f64 {
    0.5
}
fn default_gap() -> f64 {
    1.0
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if self.dataset != "toygrid" && self.dataset != "dominoes" {
            bail!("unknown dataset {:?} (expected toygrid or dominoes)", self.dataset);
        }
        if self.mix_rates.is_empty() {
            bail!("mix_rates must be nonempty");
        }
        if self.mix_rates.iter().any(|m| !(0.0..=1.0).contains(m)) {
            bail!("mix rates must lie in [0, 1]");
        }
        if self.incomplete_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            bail!("incomplete rates must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            source_train: self.source_train,
            source_val: self.source_val,
            target_train: self.target_train,
            target_val: self.target_val,
            test: self.test,
        }
    }

    pub fn dataset_config(
        &self,
        mix: f64,
        incomplete: f64,
        seed: u64,
    ) -> Result<DatasetConfig> {
        let mut cfg = match self.dataset.as_str() {
            "toygrid" => toy_grid_config(mix, seed)?,
            "dominoes" => dominoes_config(mix, self.conflict_ratio, self.gap, seed)?,
            other => bail!("unknown dataset {other:?}"),
        };
        cfg.incomplete_rate = incomplete;
        Ok(cfg)
    }

    pub fn input_dim(&self) -> usize {
        match self.dataset.as_str() {
            "toygrid" => 2,
            _ => 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub presets: Vec<String>,
    /// Number of training seeds per cell.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Optional override of every preset's epoch count.
    pub epochs: Option<usize>,
}

fn default_seeds() -> usize {
    3
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            presets: Vec::new(),
            seeds: default_seeds(),
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub preset: String,
    #[serde(default = "default_train_mix")]
    pub mix_rate: f64,
    #[serde(default)]
    pub incomplete_rate: f64,
}

fn default_train_mix() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// The dataset's actual mix rate during the sweep.
    pub true_mix: f64,
    pub totals: Vec<f64>,
    pub mins: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    pub epochs: Option<usize>,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    /// Kernel bandwidth; defaults to half the grid spacing.
    pub bandwidth: Option<f64>,
    /// Preset providing the training template; must be a top-k preset.
    #[serde(default = "default_sweep_preset")]
    pub preset: String,
}

fn default_percentile() -> f64 {
    20.0
}
fn default_sweep_preset() -> String {
    "toygrid-ace05".to_string()
}

impl SweepSection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.true_mix) {
            bail!("true_mix must lie in [0, 1]");
        }
        if self.totals.is_empty() || self.mins.is_empty() {
            bail!("sweep needs totals and mins");
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            bail!("percentile must lie in [0, 100]");
        }
        Ok(())
    }
}

/// All preset names, for error messages and docs.
pub const PRESETS: &[&str] = &[
    "toygrid-erm",
    "toygrid-ace01",
    "toygrid-ace05",
    "toygrid-divdis",
    "toygrid-dbat",
    "dominoes-erm",
    "dominoes-ace01",
    "dominoes-ace05",
    "dominoes-divdis",
    "dominoes-dbat",
];

/// Resolve a named preset into a full training config.
///
/// Shared defaults: two hidden layers of width 40, AdamW at lr 1e-3 with
/// weight decay 1e-2, 100 epochs, source batch 32, target batch 128; the
/// top-k bound ramps linearly over the whole run. Auxiliary weights on the
/// toy grid: top-k 0.1 -> 1.5, top-k 0.5 -> 1.0, mutual information -> 1.0,
/// disagreement -> 0.3; on dominoes: 1.0, 1.0, 1.5, and 0.3 respectively.
/// The dominoes presets also select checkpoints by total validation loss,
/// where the toy grid ones keep the final epoch.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let (dataset, variant) = name
        .split_once('-')
        .ok_or_else(|| anyhow::anyhow!("unknown preset {name:?}"))?;
    let toy = match dataset {
        "toygrid" => true,
        "dominoes" => false,
        _ => bail!("unknown preset {name:?} (known: {})", PRESETS.join(", ")),
    };

    let epochs = 100;
    let adamw = OptimizerConfig::adamw(1e-3, 1e-2);
    let early = if toy {
        EarlyStopping::None
    } else {
        EarlyStopping::TotalValidationLoss
    };
    let base = TrainConfig {
        method: Method::Erm,
        hidden: vec![40, 40],
        heads: 2,
        mix: MixRateConfig::balanced(2, 0.0),
        aux_weight: 0.0,
        epochs,
        n_source_batch: 32,
        n_target_batch: 128,
        optimizer: adamw,
        early_stopping: early,
        scheduling: false,
        concept_labels: false,
        per_epoch_test_metrics: false,
    };

    let ace = |bound: f64, aux: f64| -> TrainConfig {
        let mut cfg = base.clone();
        cfg.method = Method::Ace;
        cfg.mix = MixRateConfig::balanced(2, bound);
        cfg.mix.schedule_epochs = epochs;
        cfg.aux_weight = aux;
        cfg.scheduling = true;
        cfg
    };

    Ok(match variant {
        "erm" => base,
        "ace01" => ace(0.1, if toy { 1.5 } else { 1.0 }),
        "ace05" => ace(0.5, 1.0),
        "divdis" => {
            let mut cfg = base.clone();
            cfg.method = Method::DivDis;
            cfg.aux_weight = if toy { 1.0 } else { 1.5 };
            cfg
        }
        "dbat" => {
            let mut cfg = base.clone();
            cfg.method = Method::Dbat;
            cfg.aux_weight = 0.3;
            cfg
        }
        _ => bail!("unknown preset {name:?} (known: {})", PRESETS.join(", ")),
    })
}

/// Apply an epoch override, keeping the schedule horizon in step.
pub fn override_epochs(cfg: &mut TrainConfig, epochs: usize) {
    cfg.epochs = epochs;
    if cfg.scheduling {
        cfg.mix.schedule_epochs = epochs;
    }
}
