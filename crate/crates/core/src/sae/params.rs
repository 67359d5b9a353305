//! Encoder/decoder parameters and the ReLU encoder.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SAE weights. Encoder rows `0..core_size` are the frozen core.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    /// K×d, one encoder direction per row.
    pub enc_weights: Array2<f64>,
    pub enc_bias: Array1<f64>,
    /// d×K, one decoder direction per column.
    pub dec_weights: Array2<f64>,
    pub dec_bias: Array1<f64>,
    core_size: usize,
}

/// Random initialization used for every fresh parameter block.
///
/// Decoder columns are isotropic Gaussian directions scaled to unit norm,
/// non-core encoder rows start tied to their decoder column, and both bias
/// vectors are drawn from N(0, bias_std²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitScheme {
    pub bias_std: f64,
    pub enc_scale: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            bias_std: 0.01,
            enc_scale: 1.0,
        }
    }
}

impl SaeParams {
    pub fn new(
        enc_weights: Array2<f64>,
        enc_bias: Array1<f64>,
        dec_weights: Array2<f64>,
        dec_bias: Array1<f64>,
        core_size: usize,
    ) -> Result<Self> {
        let (width, dim) = enc_weights.dim();
        if enc_bias.len() != width {
            return Err(Error::Contract(format!(
                "enc_bias has {} entries, expected {width}",
                enc_bias.len()
            )));
        }
        if dec_weights.dim() != (dim, width) {
            return Err(Error::Contract(format!(
                "dec_weights is {:?}, expected ({dim}, {width})",
                dec_weights.dim()
            )));
        }
        if dec_bias.len() != dim {
            return Err(Error::Contract(format!(
                "dec_bias has {} entries, expected {dim}",
                dec_bias.len()
            )));
        }
        if core_size > width {
            return Err(Error::Contract(format!(
                "core size {core_size} exceeds width {width}"
            )));
        }
        let params = Self {
            enc_weights,
            enc_bias,
            dec_weights,
            dec_bias,
            core_size,
        };
        if !params.all_finite() {
            return Err(Error::Contract(
                "parameters contain non-finite values".into(),
            ));
        }
        Ok(params)
    }

    pub fn zeros(dim: usize, width: usize, core_size: usize) -> Self {
        assert!(core_size <= width);
        Self {
            enc_weights: Array2::zeros((width, dim)),
            enc_bias: Array1::zeros(width),
            dec_weights: Array2::zeros((dim, width)),
            dec_bias: Array1::zeros(dim),
            core_size,
        }
    }

    /// Fresh parameters with no core, drawn deterministically from `seed`.
    pub fn random(dim: usize, width: usize, scheme: &InitScheme, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dec = Array2::<f64>::zeros((dim, width));
        for mut col in dec.columns_mut() {
            loop {
                col.iter_mut()
                    .for_each(|v| *v = StandardNormal.sample(&mut rng));
                let norm = col.dot(&col).sqrt();
                if norm > 1e-8 {
                    col.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        let enc = dec.t().mapv(|v| v * scheme.enc_scale);
        let enc_bias = Array1::from_shape_fn(width, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scheme.bias_std * z
        });
        let dec_bias = Array1::from_shape_fn(dim, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scheme.bias_std * z
        });
        Self {
            enc_weights: enc,
            enc_bias,
            dec_weights: dec,
            dec_bias,
            core_size: 0,
        }
    }

    /// Fresh parameters whose first `core.nrows()` encoder rows are `core`
    /// and frozen; everything else comes from [`SaeParams::random`].
    pub fn with_core(
        core: ArrayView2<'_, f64>,
        width: usize,
        scheme: &InitScheme,
        seed: u64,
    ) -> Result<Self> {
        let (c, dim) = core.dim();
        if c > width {
            return Err(Error::Contract(format!(
                "core of {c} rows does not fit width {width}"
            )));
        }
        if core.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(
                "core rows contain non-finite values".into(),
            ));
        }
        let mut params = Self::random(dim, width, scheme, seed);
        params.enc_weights.slice_mut(s![0..c, ..]).assign(&core);
        params.core_size = c;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.enc_weights.ncols()
    }

    pub fn width(&self) -> usize {
        self.enc_weights.nrows()
    }

    pub fn core_size(&self) -> usize {
        self.core_size
    }

    pub fn core_rows(&self) -> ArrayView2<'_, f64> {
        self.enc_weights.slice(s![0..self.core_size, ..])
    }

    pub fn all_finite(&self) -> bool {
        self.enc_weights.iter().all(|v| v.is_finite())
            && self.enc_bias.iter().all(|v| v.is_finite())
            && self.dec_weights.iter().all(|v| v.is_finite())
            && self.dec_bias.iter().all(|v| v.is_finite())
    }

    /// Scales every decoder column to unit norm. Zero columns are left alone.
    pub fn normalize_decoder(&mut self) {
        for mut col in self.dec_weights.columns_mut() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col.mapv_inplace(|v| v / norm);
            }
        }
    }

    pub fn decoder_norms(&self) -> Array1<f64> {
        self.dec_weights
            .map_axis(Axis(0), |col| col.dot(&col).sqrt())
    }
}

/// Pre-mask latent activations `f(x)`, B×K, all entries ≥ 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub values: Array2<f64>,
}

/// `f(x) = ReLU(W_enc x + b_enc)` for every row of `batch`.
pub fn encode(params: &SaeParams, batch: ArrayView2<'_, f64>) -> Result<LatentBatch> {
    if batch.ncols() != params.dim() {
        return Err(Error::Contract(format!(
            "batch has {} columns, model dimension is {}",
            batch.ncols(),
            params.dim()
        )));
    }
    let mut values = batch.dot(&params.enc_weights.t());
    values.rows_mut().into_iter().for_each(|mut row| {
        row.zip_mut_with(&params.enc_bias, |v, b| *v = (*v + b).max(0.0));
    });
    Ok(LatentBatch { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn encode_relu_by_hand() {
        let params = SaeParams::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            Array1::zeros(3),
            Array2::zeros((2, 3)),
            Array1::zeros(2),
            0,
        )
        .unwrap();
        let f = encode(&params, array![[1.0, -1.0]].view()).unwrap();
        assert_eq!(f.values, array![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn encode_bias_only() {
        let params = SaeParams::new(
            Array2::zeros((2, 3)),
            array![0.5, -0.5],
            Array2::zeros((3, 2)),
            Array1::zeros(3),
            0,
        )
        .unwrap();
        let f = encode(&params, array![[3.0, -7.0, 2.5]].view()).unwrap();
        assert_eq!(f.values, array![[0.5, 0.0]]);
    }

    #[test]
    fn encode_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, d, k) = (4, 8, 6);
        let mut params = SaeParams::random(d, k, &InitScheme::default(), 3);
        params
            .enc_bias
            .mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let f = encode(&params, x.view()).unwrap();
        for u in 0..b {
            for j in 0..k {
                let mut acc = params.enc_bias[j];
                for i in 0..d {
                    acc += params.enc_weights[[j, i]] * x[[u, i]];
                }
                assert!((f.values[[u, j]] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let params = SaeParams::zeros(3, 4, 0);
        let err = encode(&params, Array2::zeros((2, 5)).view()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn random_init_is_seeded_and_unit_norm() {
        let a = SaeParams::random(5, 7, &InitScheme::default(), 42);
        let b = SaeParams::random(5, 7, &InitScheme::default(), 42);
        let c = SaeParams::random(5, 7, &InitScheme::default(), 43);
        assert_eq!(a, b);
        assert_ne!(a.dec_weights, c.dec_weights);
        for n in a.decoder_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn with_core_copies_rows() {
        let core = array![[0.25, -1.5, 3.0], [1e-3, 7.0, -2.0]];
        let p = SaeParams::with_core(core.view(), 6, &InitScheme::default(), 1).unwrap();
        assert_eq!(p.core_size(), 2);
        assert_eq!(p.core_rows(), core);
        assert!(SaeParams::with_core(core.view(), 1, &InitScheme::default(), 1).is_err());
    }
}
