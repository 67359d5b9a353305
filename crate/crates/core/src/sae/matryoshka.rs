//! Nested prefix structure over the non-core latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative non-core prefix sizes `m_0 < … < m_L` and their loss weights.
///
/// Every reconstruction also includes the whole core; there is no core-only
/// term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatryoshkaConfig {
    pub noncore_prefixes: Vec<usize>,
    pub prefix_weights: Vec<f64>,
}

impl MatryoshkaConfig {
    pub fn new(noncore_prefixes: Vec<usize>, prefix_weights: Vec<f64>) -> Result<Self> {
        let config = Self {
            noncore_prefixes,
            prefix_weights,
        };
        config.check_shape()?;
        Ok(config)
    }

    /// Uniform weights.
    pub fn uniform(noncore_prefixes: Vec<usize>) -> Result<Self> {
        let weights = vec![1.0; noncore_prefixes.len()];
        Self::new(noncore_prefixes, weights)
    }

    /// Prefixes for a non-core block of `noncore_width` latents: every
    /// boundary strictly below the width, then the width itself.
    pub fn for_width(noncore_width: usize, boundaries: &[usize]) -> Result<Self> {
        if noncore_width == 0 {
            return Err(Error::Config("non-core block is empty".into()));
        }
        let mut prefixes: Vec<usize> = boundaries
            .iter()
            .copied()
            .filter(|&m| m >= 1 && m < noncore_width)
            .collect();
        prefixes.sort_unstable();
        prefixes.dedup();
        prefixes.push(noncore_width);
        Self::uniform(prefixes)
    }

    fn check_shape(&self) -> Result<()> {
        let m = &self.noncore_prefixes;
        if m.is_empty() {
            return Err(Error::Config("at least one prefix is required".into()));
        }
        if m[0] < 1 {
            return Err(Error::Config(
                "smallest prefix must hold at least one latent".into(),
            ));
        }
        if m.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "prefixes {m:?} are not strictly increasing"
            )));
        }
        if self.prefix_weights.len() != m.len() {
            return Err(Error::Config(format!(
                "{} prefix weights for {} prefixes",
                self.prefix_weights.len(),
                m.len()
            )));
        }
        if self
            .prefix_weights
            .iter()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::Config("prefix weights must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the largest prefix covers exactly the non-core block.
    pub fn validate(&self, width: usize, core_size: usize) -> Result<()> {
        self.check_shape()?;
        let last = *self.noncore_prefixes.last().unwrap();
        if core_size > width || last != width - core_size {
            return Err(Error::Config(format!(
                "largest prefix {last} must equal K - c = {width} - {core_size}"
            )));
        }
        Ok(())
    }

    pub fn num_prefixes(&self) -> usize {
        self.noncore_prefixes.len()
    }

    /// Smallest prefix size `m_0`.
    pub fn first(&self) -> usize {
        self.noncore_prefixes[0]
    }

    /// Absolute column end of each reconstruction: `c + m_i`.
    pub fn column_ends(&self, core_size: usize) -> Vec<usize> {
        self.noncore_prefixes
            .iter()
            .map(|m| core_size + m)
            .collect()
    }

    /// Column ranges of the latent groups. Group 0 holds the core and the
    /// first non-core prefix; group `i` enters reconstruction `i` onward.
    pub fn groups(&self, core_size: usize) -> Vec<std::ops::Range<usize>> {
        let ends = self.column_ends(core_size);
        let mut start = 0;
        ends.into_iter()
            .map(|end| {
                let r = start..end;
                start = end;
                r
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn for_width_drops_oversized_boundaries() {
        let m = MatryoshkaConfig::for_width(100, &[32, 64, 128, 256]).unwrap();
        assert_eq!(m.noncore_prefixes, vec![32, 64, 100]);
        assert_eq!(m.prefix_weights, vec![1.0; 3]);
        let m = MatryoshkaConfig::for_width(64, &[32, 64]).unwrap();
        assert_eq!(m.noncore_prefixes, vec![32, 64]);
    }

    #[test]
    fn validation() {
        assert!(MatryoshkaConfig::uniform(vec![]).is_err());
        assert!(MatryoshkaConfig::uniform(vec![0, 4]).is_err());
        assert!(MatryoshkaConfig::uniform(vec![4, 4]).is_err());
        assert!(MatryoshkaConfig::new(vec![2, 4], vec![1.0]).is_err());
        assert!(MatryoshkaConfig::new(vec![2, 4], vec![1.0, -1.0]).is_err());
        let m = MatryoshkaConfig::uniform(vec![2, 6]).unwrap();
        assert!(m.validate(8, 2).is_ok());
        assert!(m.validate(8, 1).is_err());
    }

    #[test]
    fn groups_cover_the_dictionary() {
        let m = MatryoshkaConfig::uniform(vec![2, 5, 9]).unwrap();
        assert_eq!(m.groups(3), vec![0..5, 5..8, 8..12]);
        assert_eq!(m.column_ends(0), vec![2, 5, 9]);
    }
}
