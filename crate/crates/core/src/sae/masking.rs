//! BatchTopK and the two-group (core / non-core) mask.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::params::LatentBatch;
use crate::error::{Error, Result};

/// Whether the BatchTopK budget excludes the core (dense) or covers the
/// whole dictionary (sparse).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    DenseCore,
    SparseCore,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::DenseCore => "dense-core",
            Regime::SparseCore => "sparse-core",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-core" | "dense" => Ok(Regime::DenseCore),
            "sparse-core" | "sparse" => Ok(Regime::SparseCore),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

/// Masking policy for one model.
///
/// `target` is the per-token BatchTopK budget of the masked group: the
/// non-core target in the dense-core regime, the global `k` otherwise.
/// `eval_threshold` is the running threshold used for batch-independent
/// masking at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPolicy {
    pub regime: Regime,
    pub target: usize,
    pub eval_threshold: Option<f64>,
}

/// EMA decay of the evaluation threshold.
pub const THRESHOLD_DECAY: f64 = 0.99;

impl SparsityPolicy {
    pub fn dense_core(k_noncore: usize) -> Self {
        Self {
            regime: Regime::DenseCore,
            target: k_noncore,
            eval_threshold: None,
        }
    }

    pub fn sparse_core(k: usize) -> Self {
        Self {
            regime: Regime::SparseCore,
            target: k,
            eval_threshold: None,
        }
    }

    /// First column subject to BatchTopK for a model with core size `c`.
    pub fn masked_from(&self, core_size: usize) -> usize {
        match self.regime {
            Regime::DenseCore => core_size,
            Regime::SparseCore => 0,
        }
    }

    /// Folds one training batch's smallest selected activation into the
    /// evaluation threshold.
    pub fn observe_threshold(&mut self, smallest_selected: Option<f64>) {
        if let Some(v) = smallest_selected {
            self.eval_threshold = Some(match self.eval_threshold {
                None => v,
                Some(t) => THRESHOLD_DECAY * t + (1.0 - THRESHOLD_DECAY) * v,
            });
        }
    }
}

/// Post-mask latents `f̃` with the boolean mask that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLatentBatch {
    pub values: Array2<f64>,
    pub active: Array2<bool>,
}

impl MaskedLatentBatch {
    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }
}

/// Keeps the `B·k` largest strictly positive entries of the flattened batch.
///
/// Ties are broken by (row, column) order, earlier wins.
pub fn batch_top_k(values: ArrayView2<'_, f64>, k: usize) -> Result<Array2<bool>> {
    if k == 0 {
        return Err(Error::Config("BatchTopK target must be positive".into()));
    }
    let (rows, cols) = values.dim();
    let mut mask = Array2::from_elem((rows, cols), false);
    let mut candidates: Vec<(f64, usize)> = values
        .indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((r, c), v)| (*v, r * cols + c))
        .collect();
    let budget = rows.saturating_mul(k);
    if budget < candidates.len() {
        candidates.select_nth_unstable_by(budget, rank_order);
        candidates.truncate(budget);
    }
    for (_, flat) in candidates {
        mask[[flat / cols, flat % cols]] = true;
    }
    Ok(mask)
}

fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Applies the regime's mask to `latents` for a model with core size `c`.
pub fn apply_two_group_mask(
    latents: &LatentBatch,
    policy: &SparsityPolicy,
    core_size: usize,
) -> Result<MaskedLatentBatch> {
    let values = &latents.values;
    if core_size > values.ncols() {
        return Err(Error::Contract(format!(
            "core size {core_size} exceeds latent width {}",
            values.ncols()
        )));
    }
    let from = policy.masked_from(core_size);
    let mut active = values.mapv(|v| v > 0.0);
    let group = batch_top_k(values.slice(s![.., from..]), policy.target)?;
    active.slice_mut(s![.., from..]).assign(&group);
    Ok(finish_mask(values, active))
}

/// Batch-independent mask: entries of the masked group survive only when
/// they exceed the policy's evaluation threshold.
pub fn apply_threshold_mask(
    latents: &LatentBatch,
    policy: &SparsityPolicy,
    core_size: usize,
) -> Result<MaskedLatentBatch> {
    let threshold = policy.eval_threshold.ok_or_else(|| {
        Error::Eval("no evaluation threshold has been recorded for this model".into())
    })?;
    let values = &latents.values;
    let from = policy.masked_from(core_size);
    let mut active = values.mapv(|v| v > 0.0);
    active
        .slice_mut(s![.., from..])
        .zip_mut_with(&values.slice(s![.., from..]), |a, v| *a = *v > threshold);
    Ok(finish_mask(values, active))
}

fn finish_mask(values: &Array2<f64>, active: Array2<bool>) -> MaskedLatentBatch {
    let mut masked = values.clone();
    masked.zip_mut_with(&active, |v, a| {
        if !a {
            *v = 0.0
        }
    });
    MaskedLatentBatch {
        values: masked,
        active,
    }
}

/// Smallest positive activation that survived BatchTopK in the masked group.
pub fn smallest_selected(
    masked: &MaskedLatentBatch,
    policy: &SparsityPolicy,
    core_size: usize,
) -> Option<f64> {
    let from = policy.masked_from(core_size);
    masked
        .values
        .slice(s![.., from..])
        .iter()
        .copied()
        .filter(|v| *v > 0.0)
        .min_by(f64::total_cmp)
}

/// Per-token mean L0 split between core and non-core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub l0_core: f64,
    pub l0_noncore: f64,
    pub l0_global: f64,
}

/// Counts strictly positive masked entries. Core and non-core are disjoint,
/// so `l0_global` is the exact sum of the two parts.
pub fn l0_stats(masked: &MaskedLatentBatch, core_size: usize) -> SparsityStats {
    let rows = masked.batch_size();
    if rows == 0 {
        return SparsityStats::default();
    }
    let (core, noncore) = l0_counts(masked, core_size);
    let l0_core = core as f64 / rows as f64;
    let l0_noncore = noncore as f64 / rows as f64;
    SparsityStats {
        l0_core,
        l0_noncore,
        l0_global: l0_core + l0_noncore,
    }
}

/// Raw (core, non-core) active counts over the whole batch.
pub fn l0_counts(masked: &MaskedLatentBatch, core_size: usize) -> (usize, usize) {
    let core = masked
        .values
        .slice(s![.., ..core_size])
        .iter()
        .filter(|v| **v > 0.0)
        .count();
    let noncore = masked
        .values
        .slice(s![.., core_size..])
        .iter()
        .filter(|v| **v > 0.0)
        .count();
    (core, noncore)
}
