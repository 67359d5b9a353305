//! Adam with a frozen core and the per-batch training step.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::masking::{l0_stats, smallest_selected, SparsityPolicy, SparsityStats};
use super::matryoshka::MatryoshkaConfig;
use super::objective::{
    backward, check_batch, forward, matryoshka_loss, Gradients, LossBreakdown, LossConfig,
};
use super::params::SaeParams;
use crate::data::{gather, Epochs};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// One bias-corrected Adam update of a single scalar. `step` is 1-based.
    #[inline]
    pub fn update(&self, param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, step: u64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
        let m_hat = *m / (1.0 - self.beta1.powi(step as i32));
        let v_hat = *v / (1.0 - self.beta2.powi(step as i32));
        *param -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
    }
}

/// First and second moments for every parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m_enc_weights: Array2<f64>,
    pub v_enc_weights: Array2<f64>,
    pub m_enc_bias: Array1<f64>,
    pub v_enc_bias: Array1<f64>,
    pub m_dec_weights: Array2<f64>,
    pub v_dec_weights: Array2<f64>,
    pub m_dec_bias: Array1<f64>,
    pub v_dec_bias: Array1<f64>,
}

impl Moments {
    pub fn zeros(dim: usize, width: usize) -> Self {
        Self {
            m_enc_weights: Array2::zeros((width, dim)),
            v_enc_weights: Array2::zeros((width, dim)),
            m_enc_bias: Array1::zeros(width),
            v_enc_bias: Array1::zeros(width),
            m_dec_weights: Array2::zeros((dim, width)),
            v_dec_weights: Array2::zeros((dim, width)),
            m_dec_bias: Array1::zeros(dim),
            v_dec_bias: Array1::zeros(dim),
        }
    }

    /// True when the moments of encoder rows `0..core` are all zero.
    pub fn core_rows_zero(&self, core: usize) -> bool {
        self.m_enc_weights
            .slice(s![0..core, ..])
            .iter()
            .all(|v| *v == 0.0)
            && self
                .v_enc_weights
                .slice(s![0..core, ..])
                .iter()
                .all(|v| *v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub matryoshka: MatryoshkaConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub normalize_decoder: bool,
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub sparsity: SparsityStats,
    /// Non-core entries kept by the mask in this batch.
    pub noncore_active: usize,
    /// Positive non-core pre-activations available to the mask.
    pub noncore_positive: usize,
}

/// Parameters plus everything the optimizer carries between batches.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: SaeParams,
    pub config: TrainConfig,
    pub policy: SparsityPolicy,
    pub moments: Moments,
    pub step: u64,
    /// Tokens seen since each latent last had a positive masked activation.
    pub dead_tokens: Vec<u64>,
    frozen: Array2<f64>,
}

impl TrainState {
    pub fn new(params: SaeParams, config: TrainConfig, policy: SparsityPolicy) -> Result<Self> {
        config
            .matryoshka
            .validate(params.width(), params.core_size())?;
        if policy.target == 0 {
            return Err(Error::Config("sparsity target must be positive".into()));
        }
        let moments = Moments::zeros(params.dim(), params.width());
        let frozen = params.core_rows().to_owned();
        let dead_tokens = vec![0; params.width()];
        let mut state = Self {
            params,
            config,
            policy,
            moments,
            step: 0,
            dead_tokens,
            frozen,
        };
        if state.config.normalize_decoder {
            state.params.normalize_decoder();
        }
        Ok(state)
    }

    /// Rebuilds a state from checkpointed pieces.
    pub fn restore(
        params: SaeParams,
        config: TrainConfig,
        policy: SparsityPolicy,
        moments: Moments,
        step: u64,
        dead_tokens: Vec<u64>,
    ) -> Result<Self> {
        config
            .matryoshka
            .validate(params.width(), params.core_size())?;
        if dead_tokens.len() != params.width() {
            return Err(Error::Contract(
                "dead-token counters do not match width".into(),
            ));
        }
        let frozen = params.core_rows().to_owned();
        Ok(Self {
            params,
            config,
            policy,
            moments,
            step,
            dead_tokens,
            frozen,
        })
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        let threshold = self.config.loss.dead_threshold;
        self.dead_tokens.iter().map(|t| *t >= threshold).collect()
    }

    /// Loss and gradient at the current parameters without updating them.
    pub fn loss_and_gradients(
        &self,
        batch: ArrayView2<'_, f64>,
    ) -> Result<(LossBreakdown, Gradients, super::objective::Forward)> {
        check_batch(&self.params, batch)?;
        let cfg = &self.config;
        let fwd = forward(
            &self.params,
            batch,
            &self.policy,
            &cfg.matryoshka,
            &cfg.loss,
            &self.dead_mask(),
        )?;
        let loss = matryoshka_loss(
            batch,
            &fwd.reconstructions,
            fwd.aux.as_ref(),
            &cfg.matryoshka,
            &cfg.loss,
        );
        let grads = backward(&self.params, batch, &fwd, &cfg.matryoshka, &cfg.loss);
        Ok((loss, grads, fwd))
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: ArrayView2<'_, f64>) -> Result<StepReport> {
        let (loss, grads, fwd) = self.loss_and_gradients(batch)?;
        let step = self.step + 1;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                block: "loss",
                step,
            });
        }
        if let Some(block) = grads.first_non_finite() {
            return Err(Error::NonFinite { block, step });
        }
        self.apply(grads, step);
        self.step = step;

        let core = self.params.core_size();
        self.update_dead_counters(&fwd.masked.values, batch.nrows() as u64);
        self.policy
            .observe_threshold(smallest_selected(&fwd.masked, &self.policy, core));
        let noncore_positive = fwd
            .latents
            .values
            .slice(s![.., core..])
            .iter()
            .filter(|v| **v > 0.0)
            .count();
        let (_, noncore_active) = super::masking::l0_counts(&fwd.masked, core);
        Ok(StepReport {
            step,
            loss,
            sparsity: l0_stats(&fwd.masked, core),
            noncore_active,
            noncore_positive,
        })
    }

    /// Trains on shuffled batches of `data` for `tokens / batch_size` steps.
    pub fn train_tokens(
        &mut self,
        data: ArrayView2<'_, f64>,
        batch_size: usize,
        tokens: u64,
        shuffle_seed: u64,
    ) -> Result<TrainingLog> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let steps = tokens / batch_size as u64;
        let mut log = TrainingLog::default();
        if steps == 0 {
            return Ok(log);
        }
        let mut epochs = Epochs::new(data.nrows(), batch_size, shuffle_seed)?;
        for _ in 0..steps {
            let idx = epochs.next_batch();
            let batch = gather(data, &idx);
            let report = self.train_step(batch.view())?;
            log.record(&report);
        }
        Ok(log)
    }

    fn apply(&mut self, mut grads: Gradients, step: u64) {
        let adam = self.config.adam;
        let core = self.params.core_size();
        let p = &mut self.params;
        let m = &mut self.moments;

        if self.config.normalize_decoder {
            // Drop the radial component so the step stays tangent to the sphere.
            Zip::from(grads.dec_weights.columns_mut())
                .and(p.dec_weights.columns())
                .for_each(|mut g, w| {
                    let radial = g.dot(&w);
                    g.scaled_add(-radial, &w);
                });
        }

        Zip::from(p.enc_weights.slice_mut(s![core.., ..]))
            .and(grads.enc_weights.slice(s![core.., ..]))
            .and(m.m_enc_weights.slice_mut(s![core.., ..]))
            .and(m.v_enc_weights.slice_mut(s![core.., ..]))
            .for_each(|p, &g, m, v| adam.update(p, g, m, v, step));
        Zip::from(&mut p.enc_bias)
            .and(&grads.enc_bias)
            .and(&mut m.m_enc_bias)
            .and(&mut m.v_enc_bias)
            .for_each(|p, &g, m, v| adam.update(p, g, m, v, step));
        Zip::from(&mut p.dec_weights)
            .and(&grads.dec_weights)
            .and(&mut m.m_dec_weights)
            .and(&mut m.v_dec_weights)
            .for_each(|p, &g, m, v| adam.update(p, g, m, v, step));
        Zip::from(&mut p.dec_bias)
            .and(&grads.dec_bias)
            .and(&mut m.m_dec_bias)
            .and(&mut m.v_dec_bias)
            .for_each(|p, &g, m, v| adam.update(p, g, m, v, step));

        if self.config.normalize_decoder {
            p.normalize_decoder();
        }
        // Projection onto the feasible set.
        p.enc_weights
            .slice_mut(s![0..core, ..])
            .assign(&self.frozen);
    }

    fn update_dead_counters(&mut self, masked: &Array2<f64>, tokens: u64) {
        let fired = masked.map_axis(Axis(0), |col| col.iter().any(|v| *v > 0.0));
        for (count, fired) in self.dead_tokens.iter_mut().zip(fired) {
            *count = if fired {
                0
            } else {
                count.saturating_add(tokens)
            };
        }
    }
}

/// Per-step L0 counts and losses of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<u64>,
    pub l0_core: Vec<f64>,
    pub l0_noncore: Vec<f64>,
    pub loss: Vec<f64>,
}

impl TrainingLog {
    fn record(&mut self, report: &StepReport) {
        self.steps.push(report.step);
        self.l0_core.push(report.sparsity.l0_core);
        self.l0_noncore.push(report.sparsity.l0_noncore);
        self.loss.push(report.loss.total);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean of the last `window` entries of `series` (all of them if shorter).
    pub fn tail_mean(series: &[f64], window: usize) -> f64 {
        let tail = &series[series.len().saturating_sub(window)..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::params::InitScheme;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(width: usize, core: usize, prefixes: &[usize]) -> TrainConfig {
        TrainConfig {
            matryoshka: MatryoshkaConfig::for_width(width - core, prefixes).unwrap(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            normalize_decoder: true,
        }
    }

    #[test]
    fn adam_constant_gradient_by_hand() {
        let adam = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let (mut p, mut m, mut v) = (1.0, 0.0, 0.0);
        let g = 0.5;
        let mut expected = 1.0;
        for t in 1..=3u64 {
            adam.update(&mut p, g, &mut m, &mut v, t);
            // m_t = (1-β1^t) g, v_t = (1-β2^t) g², so the corrected ratio is g/|g|.
            let m_t = (1.0 - 0.9f64.powi(t as i32)) * g;
            let v_t = (1.0 - 0.999f64.powi(t as i32)) * g * g;
            let m_hat = m_t / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v_t / (1.0 - 0.999f64.powi(t as i32));
            expected -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p - expected).abs() < 1e-14, "step {t}: {p} vs {expected}");
        }
        assert!((p - (1.0 - 3.0 * 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        // Identity dictionary reconstructs exactly, so every gradient is zero.
        let params = SaeParams::new(
            Array2::eye(2),
            Array1::zeros(2),
            Array2::eye(2),
            Array1::zeros(2),
            1,
        )
        .unwrap();
        let mut cfg = config(2, 1, &[]);
        cfg.normalize_decoder = false;
        let mut state =
            TrainState::new(params.clone(), cfg, SparsityPolicy::dense_core(1)).unwrap();
        let x = array![[1.0, 2.0], [0.5, 0.25]];
        let report = state.train_step(x.view()).unwrap();
        assert_eq!(report.loss.total, 0.0);
        assert_eq!(state.params, params);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn frozen_rows_survive_many_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let core = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let params = SaeParams::with_core(core.view(), 16, &InitScheme::default(), 8).unwrap();
        let mut state = TrainState::new(
            params,
            config(16, 3, &[4, 8]),
            SparsityPolicy::dense_core(2),
        )
        .unwrap();
        state.config.loss.dead_threshold = 16;
        for _ in 0..100 {
            let x = Array2::from_shape_fn((8, 6), |_| rng.random_range(-1.0..1.0));
            state.train_step(x.view()).unwrap();
        }
        for (a, b) in state.params.core_rows().iter().zip(core.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(state.moments.core_rows_zero(3));
        for n in state.params.decoder_norms() {
            assert!((n - 1.0).abs() < 1e-10);
        }
        assert!(state.policy.eval_threshold.is_some());
    }

    #[test]
    fn non_finite_batch_names_a_block() {
        let params = SaeParams::random(3, 4, &InitScheme::default(), 1);
        let mut state =
            TrainState::new(params, config(4, 0, &[2]), SparsityPolicy::dense_core(1)).unwrap();
        let x = array![[f64::NAN, 0.0, 1.0]];
        let err = state.train_step(x.view()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn dead_counters_track_masked_activity() {
        let params = SaeParams::new(
            array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]],
            Array1::zeros(3),
            Array2::eye(2).dot(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            Array1::zeros(2),
            0,
        )
        .unwrap();
        let mut cfg = config(3, 0, &[]);
        cfg.normalize_decoder = false;
        let mut state = TrainState::new(params, cfg, SparsityPolicy::dense_core(1)).unwrap();
        state
            .train_step(array![[1.0, 0.0], [1.0, 0.0]].view())
            .unwrap();
        assert_eq!(state.dead_tokens, vec![0, 2, 2]);
    }
}
