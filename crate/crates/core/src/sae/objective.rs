//! Prefix reconstructions, the Matryoshka loss with the dead-latent
//! auxiliary term, and its analytic gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::masking::{apply_two_group_mask, MaskedLatentBatch, SparsityPolicy};
use super::matryoshka::MatryoshkaConfig;
use super::params::{encode, LatentBatch, SaeParams};
use crate::error::{Error, Result};

/// Auxiliary-loss settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// α in front of the auxiliary term.
    pub aux_coefficient: f64,
    /// Dead latents used per token to reconstruct the residual. `None`
    /// resolves to `min(K/2, 32)`.
    pub k_aux: Option<usize>,
    /// Tokens without a positive masked activation before a latent is dead.
    pub dead_threshold: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            aux_coefficient: 1.0 / 32.0,
            k_aux: None,
            dead_threshold: 10_000,
        }
    }
}

impl LossConfig {
    pub fn k_aux(&self, width: usize) -> usize {
        self.k_aux.unwrap_or((width / 2).min(32)).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_prefix_mse: Vec<f64>,
    pub aux_loss: f64,
    pub aux_coefficient: f64,
    pub total: f64,
}

/// Residual reconstruction through dead latents.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxTerm {
    /// B×K; true where a dead latent is among the token's top `k_aux`.
    pub mask: Array2<bool>,
    /// `ê_aux`, B×d, decoded without bias.
    pub reconstruction: Array2<f64>,
}

/// Everything the loss and its gradient need from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub latents: LatentBatch,
    pub masked: MaskedLatentBatch,
    pub reconstructions: Vec<Array2<f64>>,
    pub aux: Option<AuxTerm>,
}

/// `x̂_m = W_dec[:, 0:c+m] f̃[:, 0:c+m] + b_dec` for each prefix, built
/// incrementally so that prefix `i` only reads columns `0..c+m_i`.
pub fn reconstruct_prefixes(
    params: &SaeParams,
    masked: &MaskedLatentBatch,
    config: &MatryoshkaConfig,
) -> Vec<Array2<f64>> {
    let rows = masked.batch_size();
    let mut acc = Array2::<f64>::zeros((rows, params.dim()));
    acc.rows_mut()
        .into_iter()
        .for_each(|mut r| r.assign(&params.dec_bias));
    let mut out = Vec::with_capacity(config.num_prefixes());
    for group in config.groups(params.core_size()) {
        let f = masked.values.slice(s![.., group.clone()]);
        let w = params.dec_weights.slice(s![.., group]);
        acc += &f.dot(&w.t());
        out.push(acc.clone());
    }
    out
}

/// Per-token top-`k_aux` over dead latents' pre-mask activations; only
/// strictly positive values qualify, lower column wins ties.
pub fn aux_mask(latents: &LatentBatch, dead: &[bool], k_aux: usize) -> Option<Array2<bool>> {
    if !dead.iter().any(|d| *d) {
        return None;
    }
    let values = &latents.values;
    let mut mask = Array2::from_elem(values.dim(), false);
    let mut scratch = Vec::new();
    for (u, row) in values.rows().into_iter().enumerate() {
        scratch.clear();
        scratch.extend(
            row.iter()
                .enumerate()
                .filter(|(j, v)| dead[*j] && **v > 0.0)
                .map(|(j, v)| (*v, j)),
        );
        if scratch.len() > k_aux {
            scratch.select_nth_unstable_by(k_aux, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scratch.truncate(k_aux);
        }
        for &(_, j) in &scratch {
            mask[[u, j]] = true;
        }
    }
    Some(mask)
}

fn aux_term(
    params: &SaeParams,
    latents: &LatentBatch,
    dead: &[bool],
    loss: &LossConfig,
) -> Option<AuxTerm> {
    if loss.aux_coefficient == 0.0 {
        return None;
    }
    let mask = aux_mask(latents, dead, loss.k_aux(params.width()))?;
    let f_aux = select(&latents.values, &mask);
    let reconstruction = f_aux.dot(&params.dec_weights.t());
    Some(AuxTerm {
        mask,
        reconstruction,
    })
}

fn select(values: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    let mut out = values.clone();
    out.zip_mut_with(mask, |v, m| {
        if !m {
            *v = 0.0
        }
    });
    out
}

/// Encode, mask, and decode one batch. `dead` flags latents eligible for
/// the auxiliary term.
pub fn forward(
    params: &SaeParams,
    batch: ArrayView2<'_, f64>,
    policy: &SparsityPolicy,
    config: &MatryoshkaConfig,
    loss: &LossConfig,
    dead: &[bool],
) -> Result<Forward> {
    let latents = encode(params, batch)?;
    let masked = apply_two_group_mask(&latents, policy, params.core_size())?;
    let reconstructions = reconstruct_prefixes(params, &masked, config);
    let aux = aux_term(params, &latents, dead, loss);
    Ok(Forward {
        latents,
        masked,
        reconstructions,
        aux,
    })
}

fn mean_sq_norm(diff: &Array2<f64>) -> f64 {
    let rows = diff.nrows();
    if rows == 0 {
        return 0.0;
    }
    diff.iter().map(|v| v * v).sum::<f64>() / rows as f64
}

/// Weighted sum of per-prefix mean squared errors plus `α · L_aux`.
pub fn matryoshka_loss(
    batch: ArrayView2<'_, f64>,
    reconstructions: &[Array2<f64>],
    aux: Option<&AuxTerm>,
    config: &MatryoshkaConfig,
    loss: &LossConfig,
) -> LossBreakdown {
    let per_prefix_mse: Vec<f64> = reconstructions
        .iter()
        .map(|xhat| mean_sq_norm(&(&batch - xhat)))
        .collect();
    let aux_loss = match (aux, reconstructions.last()) {
        (Some(aux), Some(last)) => mean_sq_norm(&(&(&batch - last) - &aux.reconstruction)),
        _ => 0.0,
    };
    let weighted: f64 = per_prefix_mse
        .iter()
        .zip(&config.prefix_weights)
        .map(|(mse, w)| w * mse)
        .sum();
    LossBreakdown {
        total: weighted + loss.aux_coefficient * aux_loss,
        per_prefix_mse,
        aux_loss,
        aux_coefficient: loss.aux_coefficient,
    }
}

/// Gradients with the same layout as [`SaeParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub enc_weights: Array2<f64>,
    pub enc_bias: Array1<f64>,
    pub dec_weights: Array2<f64>,
    pub dec_bias: Array1<f64>,
}

impl Gradients {
    /// Names the first parameter block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        if self.enc_weights.iter().any(|v| !v.is_finite()) {
            Some("enc_weights")
        } else if self.enc_bias.iter().any(|v| !v.is_finite()) {
            Some("enc_bias")
        } else if self.dec_weights.iter().any(|v| !v.is_finite()) {
            Some("dec_weights")
        } else if self.dec_bias.iter().any(|v| !v.is_finite()) {
            Some("dec_bias")
        } else {
            None
        }
    }
}

/// Exact gradient of [`matryoshka_loss`] with the BatchTopK and auxiliary
/// masks held constant. Frozen encoder rows get a zero gradient.
///
/// With `G_i = ∂L/∂x̂_i` and suffix sums `S_g = Σ_{i≥g} G_i`, a latent in
/// group `g` receives `S_g · w_dec_j`, and its decoder column collects
/// `S_gᵀ f̃_j`. The auxiliary residual is not detached, so it feeds back into
/// the last prefix.
pub fn backward(
    params: &SaeParams,
    batch: ArrayView2<'_, f64>,
    fwd: &Forward,
    config: &MatryoshkaConfig,
    loss: &LossConfig,
) -> Gradients {
    let rows = batch.nrows();
    let (width, dim) = (params.width(), params.dim());
    let mut grads = Gradients {
        enc_weights: Array2::zeros((width, dim)),
        enc_bias: Array1::zeros(width),
        dec_weights: Array2::zeros((dim, width)),
        dec_bias: Array1::zeros(dim),
    };
    if rows == 0 {
        return grads;
    }
    let scale = -2.0 / rows as f64;
    let last = fwd.reconstructions.len() - 1;

    let aux_grad = fwd.aux.as_ref().map(|aux| {
        let residual = &(&batch - &fwd.reconstructions[last]) - &aux.reconstruction;
        residual * (scale * loss.aux_coefficient)
    });

    // Suffix sums of ∂L/∂x̂_i, walked from the largest prefix down.
    let groups = config.groups(params.core_size());
    let mut suffix = Array2::<f64>::zeros((rows, dim));
    let mut d_masked = Array2::<f64>::zeros((rows, width));
    for (i, group) in groups.iter().enumerate().rev() {
        let weight = config.prefix_weights[i] * scale;
        suffix.scaled_add(weight, &(&batch - &fwd.reconstructions[i]));
        if i == last {
            if let Some(h) = &aux_grad {
                suffix += h;
            }
        }
        let w = params.dec_weights.slice(s![.., group.clone()]);
        d_masked
            .slice_mut(s![.., group.clone()])
            .assign(&suffix.dot(&w));
        let f = fwd.masked.values.slice(s![.., group.clone()]);
        grads
            .dec_weights
            .slice_mut(s![.., group.clone()])
            .assign(&suffix.t().dot(&f));
    }
    grads.dec_bias = suffix.sum_axis(Axis(0));

    let mut d_pre = select(&d_masked, &fwd.masked.active);
    if let (Some(aux), Some(h)) = (&fwd.aux, &aux_grad) {
        let f_aux = select(&fwd.latents.values, &aux.mask);
        grads.dec_weights += &h.t().dot(&f_aux);
        let d_aux = select(&h.dot(&params.dec_weights), &aux.mask);
        d_pre += &d_aux;
    }

    grads.enc_weights = d_pre.t().dot(&batch);
    grads.enc_bias = d_pre.sum_axis(Axis(0));
    grads
        .enc_weights
        .slice_mut(s![0..params.core_size(), ..])
        .fill(0.0);
    grads
}

/// Checks `batch` against the model before a forward pass.
pub(crate) fn check_batch(params: &SaeParams, batch: ArrayView2<'_, f64>) -> Result<()> {
    if batch.ncols() != params.dim() {
        return Err(Error::Contract(format!(
            "batch has {} columns, model dimension is {}",
            batch.ncols(),
            params.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::params::InitScheme;
    use ndarray::array;

    fn hand_params() -> SaeParams {
        // d=2, K=3, c=1; prefixes {1, 2}.
        SaeParams::new(
            Array2::zeros((3, 2)),
            Array1::zeros(3),
            array![[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]],
            array![0.5, -0.5],
            1,
        )
        .unwrap()
    }

    #[test]
    fn prefixes_by_hand() {
        let params = hand_params();
        let config = MatryoshkaConfig::uniform(vec![1, 2]).unwrap();
        let masked = MaskedLatentBatch {
            values: array![[1.0, 2.0, 3.0]],
            active: Array2::from_elem((1, 3), true),
        };
        let r = reconstruct_prefixes(&params, &masked, &config);
        // core + first non-core: (0.5 + 1, -0.5 + 2)
        assert_eq!(r[0], array![[1.5, 1.5]]);
        // plus 3 * (2, -1)
        assert_eq!(r[1], array![[7.5, -1.5]]);
    }

    #[test]
    fn single_prefix_is_full_decode() {
        let params = SaeParams::random(3, 5, &InitScheme::default(), 9);
        let config = MatryoshkaConfig::uniform(vec![5]).unwrap();
        let values = array![[0.1, 0.0, 2.0, 0.3, 0.0], [0.0, 1.0, 0.0, 0.0, 0.5]];
        let masked = MaskedLatentBatch {
            active: values.mapv(|v| v > 0.0),
            values: values.clone(),
        };
        let r = reconstruct_prefixes(&params, &masked, &config);
        let mut full = values.dot(&params.dec_weights.t());
        full += &params.dec_bias;
        assert_eq!(r.len(), 1);
        for (a, b) in r[0].iter().zip(full.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_latents_decode_to_bias() {
        let params = hand_params();
        let config = MatryoshkaConfig::uniform(vec![1, 2]).unwrap();
        let masked = MaskedLatentBatch {
            values: Array2::zeros((2, 3)),
            active: Array2::from_elem((2, 3), false),
        };
        for r in reconstruct_prefixes(&params, &masked, &config) {
            assert_eq!(r, array![[0.5, -0.5], [0.5, -0.5]]);
        }
    }

    #[test]
    fn loss_by_hand() {
        let x = array![[1.0, 0.0]];
        let recons = vec![array![[0.0, 0.0]], array![[1.0, 0.0]]];
        let config = MatryoshkaConfig::uniform(vec![1, 2]).unwrap();
        let loss = LossConfig {
            aux_coefficient: 0.0,
            ..LossConfig::default()
        };
        let b = matryoshka_loss(x.view(), &recons, None, &config, &loss);
        assert_eq!(b.per_prefix_mse, vec![1.0, 0.0]);
        assert_eq!(b.total, 1.0);

        let perfect = vec![x.clone(), x.clone()];
        let b = matryoshka_loss(x.view(), &perfect, None, &config, &LossConfig::default());
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn aux_mask_picks_dead_top_k() {
        let latents = LatentBatch {
            values: array![[0.9, 0.5, 0.7, 0.0], [0.1, 0.0, 0.0, 0.2]],
        };
        let dead = [false, true, true, true];
        let m = aux_mask(&latents, &dead, 1).unwrap();
        assert_eq!(
            m,
            array![[false, false, true, false], [false, false, false, true]]
        );
        assert!(aux_mask(&latents, &[false; 4], 1).is_none());
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        // Exact reconstruction: dictionary is the identity, bias zero.
        let params = SaeParams::new(
            Array2::eye(2),
            Array1::zeros(2),
            Array2::eye(2),
            Array1::zeros(2),
            0,
        )
        .unwrap();
        let config = MatryoshkaConfig::uniform(vec![2]).unwrap();
        let loss = LossConfig::default();
        let x = array![[1.0, 2.0], [0.5, 0.25]];
        let fwd = forward(
            &params,
            x.view(),
            &SparsityPolicy::dense_core(2),
            &config,
            &loss,
            &[false; 2],
        )
        .unwrap();
        let l = matryoshka_loss(
            x.view(),
            &fwd.reconstructions,
            fwd.aux.as_ref(),
            &config,
            &loss,
        );
        assert_eq!(l.total, 0.0);
        let g = backward(&params, x.view(), &fwd, &config, &loss);
        assert!(g
            .enc_weights
            .iter()
            .chain(g.enc_bias.iter())
            .chain(g.dec_weights.iter())
            .chain(g.dec_bias.iter())
            .all(|v| *v == 0.0));
    }
}
