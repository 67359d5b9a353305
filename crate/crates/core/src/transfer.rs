//! Training from a fixed core at any sparsity target, evaluation, and
//! sweeps.

use std::path::Path;
use std::sync::Mutex;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attribution::{select_core_by_coverage, CoreSelection};
use crate::data::PreparedData;
use crate::derive_seed;
use crate::distill::{restart_init, DistillationConfig, SHUFFLE_STREAM};
use crate::error::{Error, Result};
use crate::report::{self, MetricsRow};
use crate::sae::{
    apply_threshold_mask, encode, l0_stats, AdamConfig, InitScheme, LossConfig, MatryoshkaConfig,
    Regime, SaeParams, SparsityPolicy, SparsityStats, TrainConfig, TrainState, TrainingLog,
};

/// Non-core target keeping the active fraction of non-core latents equal to
/// `k / K`: `round(k·(K−c)/K)`, halves away from zero, at least 1.
pub fn k_noncore(k: usize, width: usize, core_size: usize) -> usize {
    if width == 0 {
        return k.max(1);
    }
    let num = 2 * k as u128 * width.saturating_sub(core_size) as u128 + width as u128;
    let rounded = num / (2 * width as u128);
    (rounded as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub width: usize,
    pub k: usize,
    pub regime: Regime,
    /// In the dense-core regime, shrink the non-core target to
    /// `k_noncore(k, K, c)`; otherwise use `k` as is.
    pub scale_noncore_target: bool,
    /// Cumulative non-core prefix ends below the full non-core width.
    pub prefix_boundaries: Vec<usize>,
    pub tokens: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitScheme,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub normalize_decoder: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            width: 512,
            k: 16,
            regime: Regime::DenseCore,
            scale_noncore_target: true,
            prefix_boundaries: vec![32, 64, 128, 256],
            tokens: 256_000,
            batch_size: 256,
            seed: 0,
            init: InitScheme::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            normalize_decoder: true,
        }
    }
}

impl TransferConfig {
    pub fn policy(&self, core_size: usize) -> SparsityPolicy {
        match self.regime {
            Regime::DenseCore if self.scale_noncore_target => {
                SparsityPolicy::dense_core(k_noncore(self.k, self.width, core_size))
            }
            Regime::DenseCore => SparsityPolicy::dense_core(self.k),
            Regime::SparseCore => SparsityPolicy::sparse_core(self.k),
        }
    }

    pub fn steps(&self) -> u64 {
        self.tokens / self.batch_size.max(1) as u64
    }

    fn validate(&self, core_size: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if core_size >= self.width {
            return Err(Error::Config(format!(
                "core of {core_size} must be smaller than width {}",
                self.width
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Held-out reconstruction and sparsity at the largest prefix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean over tokens of ‖x − x̂‖².
    pub mse: f64,
    pub fve: f64,
    pub l0_core: f64,
    pub l0_noncore: f64,
    pub l0_global: f64,
    pub tokens: usize,
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the mean row of `x`.
pub fn fraction_variance_explained(
    x: ArrayView2<'_, f64>,
    xhat: ArrayView2<'_, f64>,
) -> Result<f64> {
    if x.dim() != xhat.dim() {
        return Err(Error::Contract(format!(
            "shapes {:?} and {:?} differ",
            x.dim(),
            xhat.dim()
        )));
    }
    let mean = x
        .mean_axis(ndarray::Axis(0))
        .ok_or_else(|| Error::Eval("empty evaluation stream".into()))?;
    let sst: f64 = (&x - &mean).mapv(|v| v * v).sum();
    if sst == 0.0 {
        return Err(Error::Eval(
            "evaluation stream has zero variance; FVE is undefined".into(),
        ));
    }
    let sse: f64 = (&x - &xhat).mapv(|v| v * v).sum();
    Ok(1.0 - sse / sst)
}

const EVAL_CHUNK: usize = 4096;

/// Per-token threshold masking, full-dictionary reconstruction.
pub fn eval_metrics(
    params: &SaeParams,
    policy: &SparsityPolicy,
    x: ArrayView2<'_, f64>,
) -> Result<EvalMetrics> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Eval("empty evaluation stream".into()));
    }
    let c = params.core_size();
    let mut xhat = Array2::zeros(x.dim());
    let (mut core, mut noncore) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = x.slice(s![start..end, ..]);
        let masked = apply_threshold_mask(&encode(params, chunk)?, policy, c)?;
        let mut rec = masked.values.dot(&params.dec_weights.t());
        rec += &params.dec_bias;
        xhat.slice_mut(s![start..end, ..]).assign(&rec);
        let SparsityStats {
            l0_core,
            l0_noncore,
            ..
        } = l0_stats(&masked, c);
        let rows = (end - start) as f64;
        core += l0_core * rows;
        noncore += l0_noncore * rows;
        start = end;
    }
    let fve = fraction_variance_explained(x, xhat.view())?;
    let mse = (&x - &xhat).mapv(|v| v * v).sum() / n as f64;
    let (l0_core, l0_noncore) = (core / n as f64, noncore / n as f64);
    Ok(EvalMetrics {
        mse,
        fve,
        l0_core,
        l0_noncore,
        l0_global: l0_core + l0_noncore,
        tokens: n,
    })
}

/// Result of [`transfer_train`].
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub state: TrainState,
    pub log: TrainingLog,
    pub metrics: EvalMetrics,
    pub k_noncore: usize,
}

impl TransferOutcome {
    pub fn metrics_row(&self, config: &TransferConfig) -> MetricsRow {
        let m = &self.metrics;
        MetricsRow {
            regime: config.regime.as_str().into(),
            k: config.k,
            k_noncore: self.k_noncore,
            c: self.state.params.core_size(),
            l0_core: m.l0_core,
            l0_noncore: m.l0_noncore,
            l0_global: m.l0_global,
            mse: m.mse,
            fve: m.fve,
            tokens: self.log.len() as u64 * config.batch_size as u64,
            seed: config.seed,
        }
    }
}

/// Fresh model with `core` copied into frozen rows `0..c`, trained for the
/// token budget under the configured regime, then evaluated on the held-out
/// split.
pub fn transfer_train(
    config: &TransferConfig,
    core: ArrayView2<'_, f64>,
    data: &PreparedData,
) -> Result<TransferOutcome> {
    let c = core.nrows();
    config.validate(c)?;
    if c > 0 && core.ncols() != data.dim() {
        return Err(Error::Contract(format!(
            "core rows have dimension {} but activations have {}",
            core.ncols(),
            data.dim()
        )));
    }
    let params = if c == 0 {
        SaeParams::random(data.dim(), config.width, &config.init, config.seed)
    } else {
        SaeParams::with_core(core, config.width, &config.init, config.seed)?
    };
    let train = TrainConfig {
        matryoshka: MatryoshkaConfig::for_width(config.width - c, &config.prefix_boundaries)?,
        loss: config.loss,
        adam: config.adam,
        normalize_decoder: config.normalize_decoder,
    };
    let policy = config.policy(c);
    let k_noncore = match config.regime {
        Regime::DenseCore => policy.target,
        Regime::SparseCore => k_noncore(config.k, config.width, c),
    };
    let mut state = TrainState::new(params, train, policy)?;
    let log = state.train_tokens(
        data.train_activations.view(),
        config.batch_size,
        config.tokens,
        derive_seed(config.seed, SHUFFLE_STREAM),
    )?;
    let metrics = eval_metrics(
        &state.params,
        &state.policy,
        data.held_out_activations.view(),
    )?;
    Ok(TransferOutcome {
        state,
        log,
        metrics,
        k_noncore,
    })
}

/// `c` fresh encoder rows drawn like any other initial encoder row; the
/// control for a distilled core of the same size.
pub fn random_core(core_size: usize, dim: usize, scheme: &InitScheme, seed: u64) -> Array2<f64> {
    SaeParams::random(dim, core_size, scheme, seed).enc_weights
}

/// One sweep row: metrics, or the error that stopped it.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow<T> {
    pub index: usize,
    pub result: std::result::Result<T, String>,
}

/// Runs `job` on every config with at most `jobs` threads. Rows come back in
/// config order regardless of completion order; a failed row does not stop
/// the others.
pub fn run_parallel<C, T, F>(configs: &[C], jobs: usize, job: F) -> Vec<SweepRow<T>>
where
    C: Sync,
    T: Send,
    F: Fn(usize, &C) -> Result<T> + Sync,
{
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<SweepRow<T>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("sweep counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= configs.len() {
                    break;
                }
                let result = job(i, &configs[i]).map_err(|e| {
                    log::error!("sweep row {i} failed: {e}");
                    e.to_string()
                });
                results.lock().expect("sweep results")[i] = Some(SweepRow { index: i, result });
            });
        }
    });
    results
        .into_inner()
        .expect("sweep results")
        .into_iter()
        .map(|r| r.expect("every row ran"))
        .collect()
}

/// Transfer runs over several configs sharing one core. With `out_dir`, row
/// `i` writes its checkpoint under `row_{i}/` and the table goes to
/// `metrics.csv`, with failures in `failures.csv`.
pub fn sweep(
    configs: &[TransferConfig],
    core: ArrayView2<'_, f64>,
    data: &PreparedData,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow<MetricsRow>>> {
    if configs.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one configuration".into(),
        ));
    }
    let rows = run_parallel(configs, jobs, |i, cfg| {
        let out = transfer_train(cfg, core, data)?;
        if let Some(dir) = out_dir {
            out.state
                .checkpoint()
                .write(dir.join(format!("row_{i}")).join("checkpoint.bin"))?;
        }
        Ok(out.metrics_row(cfg))
    });
    if let Some(dir) = out_dir {
        write_sweep_tables(dir, &rows)?;
    }
    Ok(rows)
}

pub fn write_sweep_tables(dir: &Path, rows: &[SweepRow<MetricsRow>]) -> Result<()> {
    let ok: Vec<MetricsRow> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().ok().cloned())
        .collect();
    report::write_text(dir.join(report::METRICS_FILE), &report::metrics_csv(&ok))?;
    let failed: Vec<Vec<String>> = rows
        .iter()
        .filter_map(|r| {
            r.result
                .as_ref()
                .err()
                .map(|e| vec![r.index.to_string(), e.replace([',', '\n'], ";")])
        })
        .collect();
    if !failed.is_empty() {
        report::write_text(
            dir.join("failures.csv"),
            &report::csv(report::FAILURES_HEADER, failed),
        )?;
    }
    Ok(())
}

pub const TAU_SWEEP_HEADER: &str = "tau,core_size,mse,fve,l0_core,l0_noncore,l0_global";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSweepRow {
    pub tau: f64,
    pub core_size: usize,
    pub metrics: EvalMetrics,
}

impl TauSweepRow {
    pub fn fields(&self) -> Vec<String> {
        let m = &self.metrics;
        vec![
            self.tau.to_string(),
            self.core_size.to_string(),
            m.mse.to_string(),
            m.fve.to_string(),
            m.l0_core.to_string(),
            m.l0_noncore.to_string(),
            m.l0_global.to_string(),
        ]
    }
}

/// Coverage sweep on shared scores: for each `τ`, select from `scores`
/// (indexed from `pool_start`), seed the next cycle's model from `prev` with
/// that core, train it as cycle `cycle` of `config`, and evaluate.
#[allow(clippy::too_many_arguments)]
pub fn tau_sweep(
    prev: &SaeParams,
    scores: &[f64],
    pool_start: usize,
    taus: &[f64],
    cycle: usize,
    config: &DistillationConfig,
    data: &PreparedData,
    jobs: usize,
) -> Result<Vec<SweepRow<TauSweepRow>>> {
    if taus.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one coverage value".into(),
        ));
    }
    Ok(run_parallel(taus, jobs, |_, &tau| {
        let mut selection: CoreSelection = select_core_by_coverage(scores, tau)?;
        for l in &mut selection.latents {
            l.index += pool_start;
        }
        let params = restart_init(
            prev,
            &selection,
            config.width,
            &config.init,
            config.cycle_seed(cycle),
        )?;
        let c = params.core_size();
        let mut state = TrainState::new(
            params,
            config.train_config(c)?,
            SparsityPolicy::dense_core(config.noncore_target(c)),
        )?;
        state.train_tokens(
            data.train_activations.view(),
            config.batch_size,
            config.cycle_tokens(cycle),
            derive_seed(config.cycle_seed(cycle), SHUFFLE_STREAM),
        )?;
        let metrics = eval_metrics(
            &state.params,
            &state.policy,
            data.held_out_activations.view(),
        )?;
        Ok(TauSweepRow {
            tau,
            core_size: c,
            metrics,
        })
    }))
}
