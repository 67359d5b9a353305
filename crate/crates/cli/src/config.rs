//! Run configurations: JSON files, flag overrides, and the echoed copy.

use std::path::{Path, PathBuf};

use dmsae_core::attribution::AttributionConfig;
use dmsae_core::data::{Dataset, PreparedData, SyntheticWorldConfig};
use dmsae_core::distill::DistillationConfig;
use dmsae_core::sae::Regime;
use dmsae_core::transfer::TransferConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "DMSAE_SEED";
pub const CONFIG_ECHO: &str = "config.json";

/// Reads `path` (or starts from defaults) rejecting unknown keys.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Seed precedence: config file, then `DMSAE_SEED`, then `--seed`.
pub fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

/// Where the activations come from and how they are split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Shard basename: `<path>.act`, `<path>.grd`, `<path>.tok`.
    pub path: Option<PathBuf>,
    pub held_out_fraction: f64,
    /// Subtract the training-split mean from every activation.
    pub center: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            held_out_fraction: 0.1,
            center: false,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<PreparedData, CliError> {
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| CliError::Usage("no data given; pass --data <basename>".into()))?;
        let dataset = Dataset::load(path)?;
        Ok(PreparedData::new(
            &dataset,
            self.held_out_fraction,
            self.center,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRun {
    pub world: SyntheticWorldConfig,
    /// Basename of the shards inside the output directory.
    pub name: String,
}

impl Default for GenRun {
    fn default() -> Self {
        Self {
            world: SyntheticWorldConfig::default(),
            name: "world".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: DataConfig,
    /// `distilled_core.json` whose rows seed a frozen core.
    pub core: Option<PathBuf>,
    pub training: TransferConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            core: None,
            training: TransferConfig {
                scale_noncore_target: false,
                ..TransferConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferRun {
    pub data: DataConfig,
    pub core: Option<PathBuf>,
    /// Replace the core with this many fresh random rows.
    pub random_core: Option<usize>,
    pub random_core_seed: u64,
    pub transfer: TransferConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectRun {
    pub data: DataConfig,
    pub checkpoint: Option<PathBuf>,
    /// Cycle label written into the selection.
    pub cycle: usize,
    pub attribution: AttributionConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillRun {
    pub data: DataConfig,
    /// Core-free checkpoint used for the cycle-0 selection instead of
    /// training one.
    pub initial: Option<PathBuf>,
    pub distillation: DistillationConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub data: DataConfig,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepGrid {
    /// Transfer training over k and regime from one core.
    #[default]
    Transfer,
    /// Full distillation at each k; reports carryover per cycle.
    Carryover,
    /// Coverage thresholds on shared scores of one distillation cycle.
    Tau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRun {
    pub grid: SweepGrid,
    pub data: DataConfig,
    pub jobs: usize,
    pub ks: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub taus: Vec<f64>,
    /// Transfer grid: `distilled_core.json` for the shared core.
    pub core: Option<PathBuf>,
    /// Tau grid: an existing distillation run directory; without it a
    /// one-cycle distillation runs first.
    pub run: Option<PathBuf>,
    /// Tau grid: cycle whose scores are shared.
    pub cycle: usize,
    pub distillation: DistillationConfig,
    pub transfer: TransferConfig,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            grid: SweepGrid::Transfer,
            data: DataConfig::default(),
            jobs: 1,
            ks: vec![1, 4, 16, 64, 256],
            regimes: vec![Regime::DenseCore],
            taus: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            core: None,
            run: None,
            cycle: 1,
            distillation: DistillationConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}
