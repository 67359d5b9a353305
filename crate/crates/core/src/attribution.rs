//! Gradient × activation attribution and coverage-based core selection.
//!
//! For token `u` with activation `x_u` and next-token-loss gradient `g_u`,
//! latent `j` in the candidate pool scores
//! `GxA[u,j] = |f̃[u,j] · g_u·w̄_j|`, where `f̃` is the training-time mask
//! and `w̄_j` the unit decoder direction. A high nearest-rank quantile over
//! tokens aggregates each column, and the core is the shortest
//! descending-score prefix reaching a fraction `τ` of the total.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gather, BatchIndices, BatchOrder};
use crate::error::{Error, Result};
use crate::sae::{apply_two_group_mask, encode, SaeParams, SparsityPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub quantile: f64,
    pub coverage: f64,
    /// Token positions sampled for scoring; `None` uses every row.
    pub num_tokens: Option<usize>,
    /// Score on the held-out split instead of the training split.
    pub held_out: bool,
    /// Rows per masking batch.
    pub batch_size: usize,
    /// Per-latent sample cap before uniform reservoir sampling kicks in.
    pub reservoir_cap: usize,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            quantile: 0.99,
            coverage: 0.9,
            num_tokens: None,
            held_out: true,
            batch_size: 256,
            reservoir_cap: 1 << 16,
            seed: 0,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        check_quantile(self.quantile)?;
        check_coverage(self.coverage)?;
        if self.batch_size == 0 || self.reservoir_cap == 0 {
            return Err(Error::Config(
                "batch_size and reservoir_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_quantile(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("quantile {q} outside (0, 1]")));
    }
    Ok(())
}

fn check_coverage(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("coverage {tau} outside (0, 1]")));
    }
    Ok(())
}

/// Per-token scores for the pool, with latents whose decoder column had
/// zero norm (scored 0).
#[derive(Clone, Debug, PartialEq)]
pub struct GxaScores {
    pub values: Array2<f64>,
    pub zero_norm_latents: Vec<usize>,
}

/// GxA for one masking batch. `activations` and `gradients` are aligned
/// row by row.
pub fn gxa_scores(
    params: &SaeParams,
    activations: ArrayView2<'_, f64>,
    gradients: ArrayView2<'_, f64>,
    policy: &SparsityPolicy,
    pool: Range<usize>,
) -> Result<GxaScores> {
    if activations.dim() != gradients.dim() {
        return Err(Error::Contract(format!(
            "activations {:?} and gradients {:?} are not aligned",
            activations.dim(),
            gradients.dim()
        )));
    }
    if pool.end > params.width() || pool.start > pool.end {
        return Err(Error::Contract(format!(
            "pool {pool:?} outside width {}",
            params.width()
        )));
    }
    let latents = encode(params, activations)?;
    let masked = apply_two_group_mask(&latents, policy, params.core_size())?;

    let dec = params.dec_weights.slice(s![.., pool.clone()]);
    let mut unit = dec.to_owned();
    let mut zero_norm_latents = Vec::new();
    for (offset, mut col) in unit.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        } else {
            zero_norm_latents.push(pool.start + offset);
        }
    }
    for &j in &zero_norm_latents {
        log::warn!("latent {j} has a zero-norm decoder column; its attribution is 0");
    }
    // s[u,j] = g_u · w̄_j
    let proj = gradients.dot(&unit);
    let mut values = masked.values.slice(s![.., pool]).to_owned();
    values.zip_mut_with(&proj, |a, s| *a = (*a * s).abs());
    Ok(GxaScores {
        values,
        zero_norm_latents,
    })
}

/// 1-based rank of the nearest-rank `q` quantile among `n` samples.
fn nearest_rank(q: f64, n: usize) -> usize {
    // Guard against q·n landing a hair above an integer.
    let r = (q * n as f64 - 1e-9).ceil() as usize;
    r.clamp(1, n)
}

/// Nearest-rank quantile of each column: the ⌈q·U⌉-th smallest value.
pub fn aggregate_quantile(gxa: ArrayView2<'_, f64>, q: f64) -> Result<Array1<f64>> {
    check_quantile(q)?;
    if gxa.nrows() == 0 {
        return Err(Error::Contract("quantile of an empty column".into()));
    }
    Ok(gxa
        .columns()
        .into_iter()
        .map(|col| {
            let mut v = col.to_vec();
            quantile_in_place(&mut v, q)
        })
        .collect())
}

fn quantile_in_place(values: &mut [f64], q: f64) -> f64 {
    let rank = nearest_rank(q, values.len());
    let (_, nth, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *nth
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedLatent {
    pub index: usize,
    pub lineage_id: Option<u64>,
    #[serde(rename = "A_j")]
    pub score: f64,
    pub cumulative_fraction: f64,
}

/// Ordered core selection; doubles as the JSON selection report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreSelection {
    pub cycle: usize,
    pub pool: Range<usize>,
    pub q: Option<f64>,
    #[serde(rename = "tau")]
    pub coverage_target: f64,
    pub total_attribution: f64,
    pub achieved_coverage: f64,
    pub latents: Vec<SelectedLatent>,
}

impl CoreSelection {
    pub fn indices(&self) -> Vec<usize> {
        self.latents.iter().map(|l| l.index).collect()
    }

    pub fn lineage_ids(&self) -> Vec<Option<u64>> {
        self.latents.iter().map(|l| l.lineage_id).collect()
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Shortest prefix of the descending-score order (ties: lower index first)
/// whose cumulative score reaches `τ · ΣA`. Zero scores never enter.
pub fn select_core_by_coverage(scores: &[f64], tau: f64) -> Result<CoreSelection> {
    check_coverage(tau)?;
    if let Some(bad) = scores.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::Selection(format!("invalid attribution score {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] > 0.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    // Summed in rank order so that the full prefix reproduces the total bit for bit.
    let total: f64 = order.iter().map(|&j| scores[j]).sum();
    if total == 0.0 {
        return Err(Error::Selection("no attribution signal".into()));
    }
    let target = tau * total;
    let mut latents = Vec::new();
    let mut cumulative = 0.0;
    for &j in &order {
        cumulative += scores[j];
        latents.push(SelectedLatent {
            index: j,
            lineage_id: None,
            score: scores[j],
            cumulative_fraction: cumulative / total,
        });
        if cumulative >= target {
            break;
        }
    }
    Ok(CoreSelection {
        cycle: 0,
        pool: 0..scores.len(),
        q: None,
        coverage_target: tau,
        total_attribution: total,
        achieved_coverage: cumulative / total,
        latents,
    })
}

/// Aggregated per-latent attribution over the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub pool: Range<usize>,
    /// `A_j` for each pool member, indexed from `pool.start`.
    pub per_latent: Vec<f64>,
    pub sample_count: Vec<usize>,
    pub source: String,
    pub zero_norm_latents: Vec<usize>,
}

/// Per-latent GxA samples, capped by uniform reservoir sampling.
struct Reservoir {
    samples: Vec<Vec<f64>>,
    seen: Vec<usize>,
    cap: usize,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(latents: usize, cap: usize, seed: u64) -> Self {
        Self {
            samples: vec![Vec::new(); latents],
            seen: vec![0; latents],
            cap,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push_batch(&mut self, gxa: &Array2<f64>) {
        for (j, col) in gxa.columns().into_iter().enumerate() {
            for &v in col {
                self.seen[j] += 1;
                if self.samples[j].len() < self.cap {
                    self.samples[j].push(v);
                } else {
                    let r = self.rng.random_range(0..self.seen[j]);
                    if r < self.cap {
                        self.samples[j][r] = v;
                    }
                }
            }
        }
    }
}

/// Streams `(x_u, g_u)` in masking batches of `config.batch_size` and
/// aggregates each pool column at quantile `q`.
pub fn score_latents(
    params: &SaeParams,
    activations: ArrayView2<'_, f64>,
    gradients: ArrayView2<'_, f64>,
    policy: &SparsityPolicy,
    pool: Range<usize>,
    config: &AttributionConfig,
) -> Result<AttributionScores> {
    config.validate()?;
    let rows = config
        .num_tokens
        .map_or(activations.nrows(), |n| n.min(activations.nrows()));
    if rows == 0 {
        return Err(Error::Contract("no tokens to score".into()));
    }
    let acts = activations.slice(s![0..rows, ..]);
    let grads = gradients.slice(s![0..rows, ..]);
    let mut reservoir = Reservoir::new(pool.len(), config.reservoir_cap, config.seed);
    let mut zero_norm = Vec::new();
    for idx in BatchIndices::new(rows, config.batch_size, BatchOrder::Sequential)? {
        let x = gather(acts, &idx);
        let g = gather(grads, &idx);
        let scores = gxa_scores(params, x.view(), g.view(), policy, pool.clone())?;
        for j in scores.zero_norm_latents {
            if !zero_norm.contains(&j) {
                zero_norm.push(j);
            }
        }
        reservoir.push_batch(&scores.values);
    }
    let per_latent = reservoir
        .samples
        .iter_mut()
        .map(|s| quantile_in_place(s, config.quantile))
        .collect();
    Ok(AttributionScores {
        pool,
        per_latent,
        sample_count: reservoir.seen,
        source: format!(
            "GxA over {rows} tokens in batches of {}, nearest-rank q={}",
            config.batch_size, config.quantile
        ),
        zero_norm_latents: zero_norm,
    })
}

/// Candidate pool `[0, c + m_0)`: the latents of the smallest reconstruction.
pub fn candidate_pool(params: &SaeParams, first_prefix: usize) -> Range<usize> {
    0..(params.core_size() + first_prefix).min(params.width())
}

/// Score the pool and select the next core. Masking reuses `policy`, the
/// model's training-time rule.
pub fn select_core_by_attribution(
    params: &SaeParams,
    first_prefix: usize,
    activations: ArrayView2<'_, f64>,
    gradients: ArrayView2<'_, f64>,
    policy: &SparsityPolicy,
    config: &AttributionConfig,
    cycle: usize,
) -> Result<(CoreSelection, AttributionScores)> {
    let pool = candidate_pool(params, first_prefix);
    let scores = score_latents(params, activations, gradients, policy, pool.clone(), config)?;
    let mut selection = select_core_by_coverage(&scores.per_latent, config.coverage)?;
    for l in &mut selection.latents {
        l.index += pool.start;
    }
    selection.cycle = cycle;
    selection.pool = pool;
    selection.q = Some(config.quantile);
    Ok((selection, scores))
}

/// Cycle-0 selection from a core-free checkpoint, with plain global
/// BatchTopK at target `k`.
pub fn select_core_cycle0(
    params: &SaeParams,
    first_prefix: usize,
    activations: ArrayView2<'_, f64>,
    gradients: ArrayView2<'_, f64>,
    k: usize,
    config: &AttributionConfig,
) -> Result<(CoreSelection, AttributionScores)> {
    if params.core_size() != 0 {
        return Err(Error::Contract(format!(
            "cycle-0 checkpoint must have no core, found {}",
            params.core_size()
        )));
    }
    let policy = SparsityPolicy::dense_core(k);
    select_core_by_attribution(
        params,
        first_prefix,
        activations,
        gradients,
        &policy,
        config,
        0,
    )
}
