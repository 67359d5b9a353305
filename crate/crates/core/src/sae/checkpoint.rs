//! Binary checkpoint file.
//!
//! Layout (little-endian):
//! - `"DMSK"`, version `u32`
//! - `d`, `K`, `c`, `|M|` as `u64`, then the non-core prefixes as `u64`
//! - `enc_weights` (K×d), `enc_bias` (K), `dec_weights` (d×K), `dec_bias` (d)
//!   as row-major `f64`
//! - optimizer flag `u8`; when 1: step `u64`, lr/β1/β2/ε `f64`, the eight
//!   moment arrays in parameter order (m then v), dead-token counters `u64`×K
//! - policy: regime `u8` (0 dense-core, 1 sparse-core), target `u64`,
//!   evaluation threshold `f64` (NaN when unset)

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::masking::{Regime, SparsityPolicy};
use super::params::SaeParams;
use super::train::{AdamConfig, Moments};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMSK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub adam: AdamConfig,
    pub moments: Moments,
    pub dead_tokens: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    pub noncore_prefixes: Vec<usize>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub policy: SparsityPolicy,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(p.dim() as u64);
        w.u64(p.width() as u64);
        w.u64(p.core_size() as u64);
        w.u64(self.noncore_prefixes.len() as u64);
        for m in &self.noncore_prefixes {
            w.u64(*m as u64);
        }
        w.f64s(p.enc_weights.iter());
        w.f64s(p.enc_bias.iter());
        w.f64s(p.dec_weights.iter());
        w.f64s(p.dec_bias.iter());
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                w.f64(opt.adam.learning_rate);
                w.f64(opt.adam.beta1);
                w.f64(opt.adam.beta2);
                w.f64(opt.adam.epsilon);
                let m = &opt.moments;
                w.f64s(m.m_enc_weights.iter());
                w.f64s(m.v_enc_weights.iter());
                w.f64s(m.m_enc_bias.iter());
                w.f64s(m.v_enc_bias.iter());
                w.f64s(m.m_dec_weights.iter());
                w.f64s(m.v_dec_weights.iter());
                w.f64s(m.m_dec_bias.iter());
                w.f64s(m.v_dec_bias.iter());
                for t in &opt.dead_tokens {
                    w.u64(*t);
                }
            }
        }
        w.u8(match self.policy.regime {
            Regime::DenseCore => 0,
            Regime::SparseCore => 1,
        });
        w.u64(self.policy.target as u64);
        w.f64(self.policy.eval_threshold.unwrap_or(f64::NAN));
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}, expected \"DMSK\"")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(4, format!("unsupported checkpoint version {version}")));
        }
        let dim = r.usize()?;
        let width = r.usize()?;
        let core = r.usize()?;
        let n_prefixes = r.usize()?;
        if core > width {
            return Err(r.error_at(24, format!("core size {core} exceeds width {width}")));
        }
        let mut prefixes = Vec::with_capacity(n_prefixes.min(1 << 16));
        for _ in 0..n_prefixes {
            prefixes.push(r.usize()?);
        }
        let enc_weights = r.matrix(width, dim)?;
        let enc_bias = r.vector(width)?;
        let dec_weights = r.matrix(dim, width)?;
        let dec_bias = r.vector(dim)?;
        let at = r.offset();
        let params = SaeParams::new(enc_weights, enc_bias, dec_weights, dec_bias, core)
            .map_err(|e| r.error_at(at, e.to_string()))?;

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let adam = AdamConfig {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let moments = Moments {
                    m_enc_weights: r.matrix(width, dim)?,
                    v_enc_weights: r.matrix(width, dim)?,
                    m_enc_bias: r.vector(width)?,
                    v_enc_bias: r.vector(width)?,
                    m_dec_weights: r.matrix(dim, width)?,
                    v_dec_weights: r.matrix(dim, width)?,
                    m_dec_bias: r.vector(dim)?,
                    v_dec_bias: r.vector(dim)?,
                };
                let mut dead_tokens = Vec::with_capacity(width);
                for _ in 0..width {
                    dead_tokens.push(r.u64()?);
                }
                Some(OptimizerSnapshot {
                    step,
                    adam,
                    moments,
                    dead_tokens,
                })
            }
            other => {
                let at = r.offset() - 1;
                return Err(r.error_at(at, format!("bad optimizer flag {other}")));
            }
        };
        let regime = match r.u8()? {
            0 => Regime::DenseCore,
            1 => Regime::SparseCore,
            other => {
                let at = r.offset() - 1;
                return Err(r.error_at(at, format!("bad regime tag {other}")));
            }
        };
        let target = r.usize()?;
        let threshold = r.f64()?;
        r.finish()?;
        Ok(Self {
            params,
            noncore_prefixes: prefixes,
            optimizer,
            policy: SparsityPolicy {
                regime,
                target,
                eval_threshold: (!threshold.is_nan()).then_some(threshold),
            },
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Standalone core sidecar: `"DMSC"`, version `u32`, `d` `u64`, `c` `u64`,
/// then the c×d encoder rows as row-major `f64`.
pub const CORE_MAGIC: &[u8; 4] = b"DMSC";

pub fn write_core_rows(path: impl AsRef<Path>, rows: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = ByteWriter::default();
    w.bytes(CORE_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(rows.ncols() as u64);
    w.u64(rows.nrows() as u64);
    w.f64s(rows.iter());
    std::fs::write(path, w.into_inner()).map_err(|e| Error::io(path, e))
}

pub fn read_core_rows(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4)? != CORE_MAGIC {
        return Err(r.error_at(0, "bad magic, expected \"DMSC\"".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error_at(4, format!("unsupported core version {version}")));
    }
    let dim = r.usize()?;
    let rows = r.usize()?;
    let m = r.matrix(rows, dim)?;
    r.finish()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::params::InitScheme;

    fn sample(with_opt: bool) -> Checkpoint {
        let params = SaeParams::random(3, 5, &InitScheme::default(), 2);
        let mut moments = Moments::zeros(3, 5);
        moments.v_dec_bias[1] = 0.25;
        Checkpoint {
            params,
            noncore_prefixes: vec![2, 5],
            optimizer: with_opt.then(|| OptimizerSnapshot {
                step: 17,
                adam: AdamConfig::default(),
                moments,
                dead_tokens: vec![0, 1, 2, 3, 40_000],
            }),
            policy: SparsityPolicy {
                regime: Regime::SparseCore,
                target: 3,
                eval_threshold: Some(0.125),
            },
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        for with_opt in [false, true] {
            let ck = sample(with_opt);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut bytes = sample(true).to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        let err = Checkpoint::from_bytes(truncated, Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes, Path::new("v")).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn core_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.5 * j as f64);
        let path = dir.path().join("core.bin");
        write_core_rows(&path, &rows).unwrap();
        assert_eq!(read_core_rows(&path).unwrap(), rows);
        let empty = Array2::<f64>::zeros((0, 3));
        write_core_rows(&path, &empty).unwrap();
        assert_eq!(read_core_rows(&path).unwrap().dim(), (0, 3));
    }
}
