//! Deterministic mini-batch streams.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchOrder {
    Sequential,
    Shuffled { seed: u64 },
}

/// One pass over a row order, `batch_size` rows at a time; the final batch
/// may be short.
#[derive(Clone, Debug)]
pub struct BatchIndices {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIndices {
    pub fn new(rows: usize, batch_size: usize, order: BatchOrder) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut idx: Vec<usize> = (0..rows).collect();
        if let BatchOrder::Shuffled { seed } = order {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self {
            order: idx,
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for BatchIndices {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

pub fn gather(rows: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    rows.select(Axis(0), idx)
}

/// Batches over the concatenation of `shards`.
pub fn stream_batches(
    shards: &[ArrayView2<'_, f64>],
    batch_size: usize,
    order: BatchOrder,
) -> Result<impl Iterator<Item = Array2<f64>>> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Config("no shards to stream".into()))?;
    let dim = first.ncols();
    if let Some(bad) = shards.iter().find(|s| s.ncols() != dim) {
        return Err(Error::Contract(format!(
            "shard width {} does not match {dim}",
            bad.ncols()
        )));
    }
    let all = concatenate(Axis(0), shards).expect("widths checked");
    let indices = BatchIndices::new(all.nrows(), batch_size, order)?;
    Ok(indices.map(move |idx| gather(all.view(), &idx)))
}

/// Endless training stream: reshuffles with `seed + epoch` at every pass.
#[derive(Clone, Debug)]
pub struct Epochs {
    rows: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: BatchIndices,
}

impl Epochs {
    pub fn new(rows: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Config("training data is empty".into()));
        }
        Ok(Self {
            rows,
            batch_size,
            seed,
            epoch: 0,
            current: BatchIndices::new(rows, batch_size, BatchOrder::Shuffled { seed })?,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.current.next() {
                return b;
            }
            self.epoch += 1;
            let seed = self.seed.wrapping_add(self.epoch);
            self.current =
                BatchIndices::new(self.rows, self.batch_size, BatchOrder::Shuffled { seed })
                    .expect("batch size already validated");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(i, j)| (10 * i + j) as f64)
    }

    #[test]
    fn ten_rows_in_fours() {
        let data = rows(10);
        let sizes: Vec<usize> = stream_batches(&[data.view()], 4, BatchOrder::Sequential)
            .unwrap()
            .map(|b| b.nrows())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn sequential_keeps_order_across_shards() {
        let a = rows(3);
        let b = rows(2) + 100.0;
        let out: Vec<Array2<f64>> =
            stream_batches(&[a.view(), b.view()], 2, BatchOrder::Sequential)
                .unwrap()
                .collect();
        let joined =
            concatenate(Axis(0), &out.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
        assert_eq!(joined, concatenate(Axis(0), &[a.view(), b.view()]).unwrap());
    }

    #[test]
    fn shuffled_is_seeded() {
        let data = rows(20);
        let a: Vec<_> = stream_batches(&[data.view()], 3, BatchOrder::Shuffled { seed: 4 })
            .unwrap()
            .collect();
        let b: Vec<_> = stream_batches(&[data.view()], 3, BatchOrder::Shuffled { seed: 4 })
            .unwrap()
            .collect();
        let c: Vec<_> = stream_batches(&[data.view()], 3, BatchOrder::Shuffled { seed: 5 })
            .unwrap()
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn errors() {
        let a = rows(3);
        let wide = Array2::<f64>::zeros((2, 3));
        assert!(stream_batches(&[a.view(), wide.view()], 2, BatchOrder::Sequential).is_err());
        assert!(stream_batches(&[], 2, BatchOrder::Sequential).is_err());
        assert!(stream_batches(&[a.view()], 0, BatchOrder::Sequential).is_err());
    }

    #[test]
    fn epochs_wrap_around() {
        let mut e = Epochs::new(5, 2, 1).unwrap();
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(e.next_batch());
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(e.next_batch().len(), 2);
    }
}
