//! Synthetic activations built from planted sparse features, plus a toy
//! next-token head that supplies loss gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::shard::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub dim: usize,
    pub num_features: usize,
    /// Planted features active in every token.
    pub features_per_token: usize,
    pub noise_std: f64,
    pub vocab_size: usize,
    pub num_tokens: usize,
    pub seed: u64,
    /// Firing rates fall off as `(f + 1)^-rate_decay` before rescaling.
    pub rate_decay: f64,
    pub magnitude_low: f64,
    pub magnitude_high: f64,
    /// Norm of each head row.
    pub head_scale: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_features: 96,
            features_per_token: 4,
            noise_std: 0.05,
            vocab_size: 24,
            num_tokens: 50_000,
            seed: 0,
            rate_decay: 0.8,
            magnitude_low: 0.5,
            magnitude_high: 1.5,
            head_scale: 4.0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.num_features == 0 {
            return bad("dim and num_features must be positive");
        }
        if self.features_per_token > self.num_features {
            return bad("features_per_token exceeds num_features");
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("noise_std must be non-negative");
        }
        if self.vocab_size == 0 || self.vocab_size > self.num_features {
            return bad("vocab_size must be in 1..=num_features");
        }
        if !(self.magnitude_low > 0.0 && self.magnitude_low <= self.magnitude_high) {
            return bad("magnitudes must satisfy 0 < low <= high");
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedDictionary {
    /// F×d, unit-norm rows.
    pub directions: Array2<f64>,
    /// Per-token inclusion probability of each feature; sums to `s`.
    pub rates: Vec<f64>,
    pub magnitude_low: f64,
    pub magnitude_high: f64,
    /// V×d next-token head; row `v` is a scaled copy of planted direction
    /// `head_features[v]`.
    pub head: Array2<f64>,
    pub head_features: Vec<usize>,
}

/// Generated stream: activations, the features behind each row, and targets
/// sampled from the head's softmax over the noise-free activation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub dictionary: PlantedDictionary,
    pub activations: Array2<f64>,
    /// Per token, the active planted features with their magnitudes.
    pub codes: Vec<Vec<(usize, f64)>>,
    pub targets: Vec<u32>,
    pub seed: u64,
}

/// Inclusion probabilities ∝ (f+1)^-decay with total `s`, capped at 1.
pub fn firing_rates(num_features: usize, s: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_features)
        .map(|f| ((f + 1) as f64).powf(-decay))
        .collect();
    let mut rates = vec![0.0; num_features];
    let mut capped = vec![false; num_features];
    loop {
        let fixed = capped.iter().filter(|c| **c).count() as f64;
        let free: f64 = raw
            .iter()
            .zip(&capped)
            .filter(|(_, c)| !**c)
            .map(|(r, _)| r)
            .sum();
        let mut changed = false;
        for f in 0..num_features {
            if capped[f] {
                rates[f] = 1.0;
                continue;
            }
            rates[f] = if free > 0.0 {
                raw[f] * (s as f64 - fixed) / free
            } else {
                0.0
            };
            if rates[f] > 1.0 {
                capped[f] = true;
                changed = true;
            }
        }
        if !changed {
            return rates;
        }
    }
}

/// Draws exactly `s` distinct features with marginal inclusion
/// probabilities `rates` (systematic sampling over a random order).
fn sample_features(
    rates: &[f64],
    s: usize,
    rng: &mut ChaCha8Rng,
    order: &mut Vec<usize>,
    out: &mut Vec<usize>,
) {
    out.clear();
    if s == 0 {
        return;
    }
    order.clear();
    order.extend(0..rates.len());
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let total: f64 = rates.iter().sum();
    let scale = s as f64 / total;
    let mut point: f64 = rng.random::<f64>();
    let mut hi = 0.0;
    for (pos, &f) in order.iter().enumerate() {
        hi += rates[f] * scale;
        if pos + 1 == order.len() {
            hi = s as f64;
        }
        if point < hi && out.len() < s {
            out.push(f);
            point += 1.0;
        }
    }
    out.sort_unstable();
}

fn random_unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, dim));
    for mut row in m.rows_mut() {
        loop {
            row.iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut *rng));
            let n = row.dot(&row).sqrt();
            if n > 1e-8 {
                row.mapv_inplace(|v| v / n);
                break;
            }
        }
    }
    m
}

/// Generates a world deterministically from `config.seed`.
pub fn gen_synthetic_world(config: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, f, v) = (config.dim, config.num_features, config.vocab_size);
    let directions = random_unit_rows(f, d, &mut rng);
    let rates = firing_rates(f, config.features_per_token, config.rate_decay);
    let head_features: Vec<usize> = (0..v).map(|i| i * f / v).collect();
    let mut head = Array2::<f64>::zeros((v, d));
    for (row, &feat) in head_features.iter().enumerate() {
        head.row_mut(row)
            .assign(&directions.row(feat).mapv(|x| x * config.head_scale));
    }

    let n = config.num_tokens;
    let mut activations = Array2::<f64>::zeros((n, d));
    let mut codes = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let (mut order, mut picked) = (Vec::new(), Vec::new());
    let mut clean = Array1::<f64>::zeros(d);
    for u in 0..n {
        sample_features(
            &rates,
            config.features_per_token,
            &mut rng,
            &mut order,
            &mut picked,
        );
        clean.fill(0.0);
        let mut code = Vec::with_capacity(picked.len());
        for &feat in &picked {
            let mag = if config.magnitude_high > config.magnitude_low {
                rng.random_range(config.magnitude_low..config.magnitude_high)
            } else {
                config.magnitude_low
            };
            clean.scaled_add(mag, &directions.row(feat));
            code.push((feat, mag));
        }
        let probs = softmax(&head.dot(&clean));
        targets.push(sample_categorical(&probs, rng.random::<f64>()) as u32);
        let mut row = activations.row_mut(u);
        row.assign(&clean);
        if config.noise_std > 0.0 {
            row.iter_mut().for_each(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += config.noise_std * z;
            });
        }
        codes.push(code);
    }

    Ok(SyntheticWorld {
        dictionary: PlantedDictionary {
            directions,
            rates,
            magnitude_low: config.magnitude_low,
            magnitude_high: config.magnitude_high,
            head,
            head_features,
        },
        activations,
        codes,
        targets,
        seed: config.seed,
    })
}

impl SyntheticWorld {
    /// `g_u` for every token, from the toy head at the observed activation.
    pub fn gradients(&self) -> Array2<f64> {
        let head = &self.dictionary.head;
        let mut g = Array2::<f64>::zeros(self.activations.dim());
        for (u, mut row) in g.rows_mut().into_iter().enumerate() {
            row.assign(&toy_lm_grad(
                head.view(),
                self.activations.row(u),
                self.targets[u],
            ));
        }
        g
    }

    pub fn into_dataset(self) -> Dataset {
        let gradients = Some(self.gradients());
        Dataset {
            seed: self.seed,
            activations: self.activations,
            gradients,
            targets: Some(self.targets),
        }
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let sum = exp.sum();
    exp / sum
}

fn sample_categorical(probs: &Array1<f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Cross-entropy of target `y` under `softmax(head · x)`.
pub fn toy_lm_loss(head: ArrayView2<'_, f64>, x: ArrayView1<'_, f64>, y: u32) -> f64 {
    let logits = head.dot(&x);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[y as usize]
}

/// `∂L/∂x = headᵀ (softmax(head · x) − onehot(y))`.
pub fn toy_lm_grad(head: ArrayView2<'_, f64>, x: ArrayView1<'_, f64>, y: u32) -> Array1<f64> {
    assert!((y as usize) < head.nrows(), "target {y} outside vocabulary");
    let mut p = softmax(&head.dot(&x));
    p[y as usize] -= 1.0;
    head.t().dot(&p)
}
