//! Training / held-out partition of a dataset.

use ndarray::{s, Array1, Array2, Axis};

use super::shard::Dataset;
use crate::error::{Error, Result};

/// Owned rows for training and for attribution/evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train_activations: Array2<f64>,
    pub train_gradients: Option<Array2<f64>>,
    pub held_out_activations: Array2<f64>,
    pub held_out_gradients: Option<Array2<f64>>,
    /// Training-split mean subtracted from every activation, when centering.
    pub mean: Option<Array1<f64>>,
}

impl PreparedData {
    /// The last `round(held_out_fraction · n)` rows are held out; with a
    /// fraction of 0 both splits are the full dataset.
    pub fn new(data: &Dataset, held_out_fraction: f64, center: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::Config(format!(
                "held_out_fraction {held_out_fraction} outside [0, 1)"
            )));
        }
        let n = data.len();
        let held = (held_out_fraction * n as f64).round() as usize;
        if n == 0 || (held_out_fraction > 0.0 && (held == 0 || held >= n)) {
            return Err(Error::Config(format!(
                "cannot hold out {held_out_fraction} of {n} rows"
            )));
        }
        let cut = if held == 0 { 0 } else { n - held };
        let acts = &data.activations;
        let grads = data.gradients.as_ref();
        let (train_a, held_a) = if held == 0 {
            (acts.clone(), acts.clone())
        } else {
            (
                acts.slice(s![..cut, ..]).to_owned(),
                acts.slice(s![cut.., ..]).to_owned(),
            )
        };
        let (train_g, held_g) = match grads {
            None => (None, None),
            Some(g) if held == 0 => (Some(g.clone()), Some(g.clone())),
            Some(g) => (
                Some(g.slice(s![..cut, ..]).to_owned()),
                Some(g.slice(s![cut.., ..]).to_owned()),
            ),
        };
        let mut prepared = Self {
            train_activations: train_a,
            train_gradients: train_g,
            held_out_activations: held_a,
            held_out_gradients: held_g,
            mean: None,
        };
        if center {
            let mean = prepared
                .train_activations
                .mean_axis(Axis(0))
                .expect("training split is non-empty");
            prepared.train_activations -= &mean;
            prepared.held_out_activations -= &mean;
            prepared.mean = Some(mean);
        }
        Ok(prepared)
    }

    pub fn dim(&self) -> usize {
        self.train_activations.ncols()
    }

    /// Activation/gradient pair used for attribution.
    pub fn attribution_split(&self, held_out: bool) -> Result<(&Array2<f64>, &Array2<f64>)> {
        let (a, g) = if held_out {
            (&self.held_out_activations, &self.held_out_gradients)
        } else {
            (&self.train_activations, &self.train_gradients)
        };
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Config("attribution needs a gradient shard (.grd)".into()))?;
        Ok((a, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    fn dataset(n: usize) -> Dataset {
        let rows = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        Dataset {
            seed: 0,
            activations: rows.clone(),
            gradients: Some(-rows),
            targets: None,
        }
    }

    #[test]
    fn tail_is_held_out() {
        let p = PreparedData::new(&dataset(10), 0.2, false).unwrap();
        assert_eq!(p.train_activations.nrows(), 8);
        assert_eq!(p.held_out_activations.row(0).to_vec(), vec![16.0, 17.0]);
        assert_eq!(
            p.held_out_gradients.unwrap().row(1).to_vec(),
            vec![-18.0, -19.0]
        );
    }

    #[test]
    fn zero_fraction_shares_rows() {
        let p = PreparedData::new(&dataset(4), 0.0, false).unwrap();
        assert_eq!(p.train_activations, p.held_out_activations);
    }

    #[test]
    fn centering_uses_training_mean() {
        let p = PreparedData::new(&dataset(4), 0.25, true).unwrap();
        assert_eq!(p.mean.as_ref().unwrap().to_vec(), vec![2.0, 3.0]);
        assert_eq!(p.held_out_activations.row(0).to_vec(), vec![4.0, 4.0]);
        let sum: f64 = p.train_activations.sum();
        assert_eq!(sum, 0.0);
    }

    #[test]
    fn bad_fractions() {
        assert!(PreparedData::new(&dataset(4), 1.0, false).is_err());
        assert!(PreparedData::new(&dataset(4), 0.01, false).is_err());
    }
}
