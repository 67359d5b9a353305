//! Activation, gradient, and target shard files.
//!
//! Every shard starts with a 32-byte little-endian header:
//!
//! | bytes | field |
//! |-------|-------|
//! | 0–3   | magic (`DMSA`, `DMSG`, or `DMST`) |
//! | 4–7   | version `u32` |
//! | 8–15  | row width `d` `u64` (1 for targets) |
//! | 16–23 | row count `u64` |
//! | 24–31 | generator seed `u64` |
//!
//! The payload follows at offset 32: row-major `f64` for activations and
//! gradients, one `u32` per row for targets. A dataset named `xxx` lives in
//! `xxx.act`, `xxx.grd`, and `xxx.tok`.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const SHARD_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardKind {
    Activations,
    Gradients,
    Targets,
}

impl ShardKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            ShardKind::Activations => b"DMSA",
            ShardKind::Gradients => b"DMSG",
            ShardKind::Targets => b"DMST",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ShardKind::Activations => "act",
            ShardKind::Gradients => "grd",
            ShardKind::Targets => "tok",
        }
    }
}

/// Row-major `f64` shard: activations `x_u` or loss gradients `g_u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub kind: ShardKind,
    pub seed: u64,
    pub rows: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetShard {
    pub seed: u64,
    pub targets: Vec<u32>,
}

fn header(w: &mut ByteWriter, kind: ShardKind, width: usize, rows: usize, seed: u64) {
    w.bytes(kind.magic());
    w.u32(SHARD_VERSION);
    w.u64(width as u64);
    w.u64(rows as u64);
    w.u64(seed);
}

/// Parses the header and checks the payload length. Returns (width, rows, seed).
fn read_header(
    r: &mut ByteReader<'_>,
    kind: ShardKind,
    total: usize,
    elem: usize,
) -> Result<(usize, usize, u64)> {
    let magic = r.take(4)?;
    if magic != kind.magic() {
        return Err(r.error_at(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(kind.magic())
            ),
        ));
    }
    let version = r.u32()?;
    if version != SHARD_VERSION {
        return Err(r.error_at(4, format!("unsupported shard version {version}")));
    }
    let width = r.usize()?;
    let rows = r.usize()?;
    let seed = r.u64()?;
    let expected = rows
        .checked_mul(width)
        .and_then(|n| n.checked_mul(elem))
        .ok_or_else(|| r.error_at(8, format!("shape {rows}x{width} overflows")))?;
    let actual = total - HEADER_LEN;
    if actual != expected {
        let what = if actual < expected {
            "truncated payload"
        } else {
            "oversized payload"
        };
        return Err(r.error_at(
            HEADER_LEN as u64,
            format!("{what}: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok((width, rows, seed))
}

impl Shard {
    pub fn new(kind: ShardKind, seed: u64, rows: Array2<f64>) -> Result<Self> {
        if kind == ShardKind::Targets {
            return Err(Error::Contract(
                "targets are stored in a TargetShard".into(),
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("shard rows must be finite".into()));
        }
        Ok(Self { kind, seed, rows })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        header(
            &mut w,
            self.kind,
            self.rows.ncols(),
            self.rows.nrows(),
            self.seed,
        );
        w.f64s(self.rows.iter());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], kind: ShardKind, path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if bytes.len() < HEADER_LEN {
            return Err(r.error_at(
                0,
                format!(
                    "truncated header: expected {HEADER_LEN} bytes, found {}",
                    bytes.len()
                ),
            ));
        }
        let (width, rows, seed) = read_header(&mut r, kind, bytes.len(), 8)?;
        let data = r.matrix(rows, width)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(r.error_at((HEADER_LEN + 8 * i) as u64, "non-finite value".into()));
        }
        Ok(Self {
            kind,
            seed,
            rows: data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>, kind: ShardKind) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, kind, path)
    }
}

impl TargetShard {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        header(&mut w, ShardKind::Targets, 1, self.targets.len(), self.seed);
        for t in &self.targets {
            w.u32(*t);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if bytes.len() < HEADER_LEN {
            return Err(r.error_at(
                0,
                format!(
                    "truncated header: expected {HEADER_LEN} bytes, found {}",
                    bytes.len()
                ),
            ));
        }
        let (width, rows, seed) = read_header(&mut r, ShardKind::Targets, bytes.len(), 4)?;
        if width != 1 {
            return Err(r.error_at(8, format!("target shard width must be 1, found {width}")));
        }
        let mut targets = Vec::with_capacity(rows);
        for _ in 0..rows {
            targets.push(r.u32()?);
        }
        Ok(Self { seed, targets })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Aligned activations, gradients, and targets sharing a basename.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub activations: Array2<f64>,
    pub gradients: Option<Array2<f64>>,
    pub targets: Option<Vec<u32>>,
}

pub fn shard_path(basename: &Path, kind: ShardKind) -> PathBuf {
    let mut name = basename.as_os_str().to_owned();
    name.push(".");
    name.push(kind.extension());
    PathBuf::from(name)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.activations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.activations.ncols()
    }

    pub fn save(&self, basename: impl AsRef<Path>) -> Result<()> {
        let base = basename.as_ref();
        Shard::new(ShardKind::Activations, self.seed, self.activations.clone())?
            .write(shard_path(base, ShardKind::Activations))?;
        if let Some(g) = &self.gradients {
            Shard::new(ShardKind::Gradients, self.seed, g.clone())?
                .write(shard_path(base, ShardKind::Gradients))?;
        }
        if let Some(t) = &self.targets {
            TargetShard {
                seed: self.seed,
                targets: t.clone(),
            }
            .write(shard_path(base, ShardKind::Targets))?;
        }
        Ok(())
    }

    /// Loads `basename.act` and, when present, the paired `.grd` and `.tok`.
    pub fn load(basename: impl AsRef<Path>) -> Result<Self> {
        let base = basename.as_ref();
        let act = Shard::read(
            shard_path(base, ShardKind::Activations),
            ShardKind::Activations,
        )?;
        let grd_path = shard_path(base, ShardKind::Gradients);
        let gradients = if grd_path.exists() {
            let g = Shard::read(&grd_path, ShardKind::Gradients)?;
            if g.rows.dim() != act.rows.dim() {
                return Err(Error::Contract(format!(
                    "{} is {:?} but activations are {:?}",
                    grd_path.display(),
                    g.rows.dim(),
                    act.rows.dim()
                )));
            }
            Some(g.rows)
        } else {
            None
        };
        let tok_path = shard_path(base, ShardKind::Targets);
        let targets = if tok_path.exists() {
            let t = TargetShard::read(&tok_path)?;
            if t.targets.len() != act.rows.nrows() {
                return Err(Error::Contract(format!(
                    "{} has {} rows but activations have {}",
                    tok_path.display(),
                    t.targets.len(),
                    act.rows.nrows()
                )));
            }
            Some(t.targets)
        } else {
            None
        };
        Ok(Self {
            seed: act.seed,
            activations: act.rows,
            gradients,
            targets,
        })
    }

    pub fn require_gradients(&self) -> Result<&Array2<f64>> {
        self.gradients
            .as_ref()
            .ok_or_else(|| Error::Contract("dataset has no gradient shard".into()))
    }
}
