//! Little-endian byte cursor shared by the binary formats.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::error::Error;

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64s<'a>(&mut self, values: impl Iterator<Item = &'a f64>) {
        for v in values {
            self.f64(*v);
        }
    }
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error_at(&self, offset: u64, message: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            message,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(self.error_at(
                self.pos as u64,
                format!("truncated: expected {n} more bytes, found {available}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn usize(&mut self) -> Result<usize, Error> {
        let at = self.offset();
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.error_at(at, format!("value {v} does not fit usize")))
    }
    pub fn f64(&mut self) -> Result<f64, Error> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads `n` floats after checking the whole block is present.
    pub fn f64_block(&mut self, n: usize) -> Result<Vec<f64>, Error> {
        let len = n.checked_mul(8).ok_or_else(|| {
            self.error_at(self.offset(), format!("block of {n} floats overflows"))
        })?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, Error> {
        let at = self.offset();
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.error_at(at, format!("shape {rows}x{cols} overflows")))?;
        let data = self.f64_block(n)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }

    pub fn vector(&mut self, n: usize) -> Result<Array1<f64>, Error> {
        Ok(Array1::from(self.f64_block(n)?))
    }

    /// Fails if bytes remain after the last field.
    pub fn finish(&self) -> Result<(), Error> {
        let extra = self.bytes.len() - self.pos;
        if extra != 0 {
            return Err(self.error_at(self.pos as u64, format!("{extra} trailing bytes")));
        }
        Ok(())
    }
}
