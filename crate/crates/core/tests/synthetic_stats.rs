//! Law-of-large-numbers checks on the generator against its configured rates
//! and magnitude range.

use dmsae_core::data::{gen_synthetic_world, SyntheticWorldConfig};

const TOKENS: usize = 100_000;

fn world(seed: u64, rate_decay: f64) -> dmsae_core::data::SyntheticWorld {
    gen_synthetic_world(&SyntheticWorldConfig {
        num_tokens: TOKENS,
        seed,
        rate_decay,
        ..SyntheticWorldConfig::default()
    })
    .unwrap()
}

#[test]
fn firing_rates_within_three_standard_errors() {
    for (seed, decay) in [(21, 0.8), (22, 2.0)] {
        let w = world(seed, decay);
        let rates = &w.dictionary.rates;
        let mut counts = vec![0usize; rates.len()];
        for code in &w.codes {
            for &(f, _) in code {
                counts[f] += 1;
            }
        }
        let n = TOKENS as f64;
        for (f, (&p, &c)) in rates.iter().zip(&counts).enumerate() {
            let se = (p * (1.0 - p) / n).sqrt();
            let observed = c as f64 / n;
            if se == 0.0 {
                assert_eq!(observed, p, "feature {f}");
            } else {
                assert!(
                    (observed - p).abs() <= 3.0 * se,
                    "decay {decay} feature {f}: observed {observed}, configured {p}, se {se}"
                );
            }
        }
    }
}

#[test]
fn magnitudes_within_three_standard_errors() {
    let w = world(23, 0.8);
    let (lo, hi) = (w.dictionary.magnitude_low, w.dictionary.magnitude_high);
    let mean = 0.5 * (lo + hi);
    let sd = (hi - lo) / 12f64.sqrt();
    let mut sums = vec![(0.0, 0usize); w.dictionary.rates.len()];
    for code in &w.codes {
        for &(f, m) in code {
            assert!((lo..hi).contains(&m));
            sums[f].0 += m;
            sums[f].1 += 1;
        }
    }
    for (f, &(s, c)) in sums.iter().enumerate() {
        if c < 30 {
            continue;
        }
        let observed = s / c as f64;
        let se = sd / (c as f64).sqrt();
        assert!(
            (observed - mean).abs() <= 3.0 * se,
            "feature {f}: {observed} vs {mean} (se {se})"
        );
    }
}

#[test]
fn every_token_has_exactly_s_features() {
    let w = world(24, 0.8);
    assert!(w.codes.iter().all(|c| c.len() == 4));
    let total: f64 = w.dictionary.rates.iter().sum();
    assert!((total - 4.0).abs() < 1e-9);
}
