//! Continuous power-law fit with KS-optimal lower cutoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CATEGORIES: usize = 20;
/// Smallest tail the cutoff sweep will consider.
pub const MIN_TAIL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub xmin: f64,
    /// Kolmogorov-Smirnov distance between the tail and the fitted model.
    pub ks: f64,
    pub n_tail: usize,
}

/// `1 + n / Σ ln(x/xmin)` over the sorted tail.
pub fn mle_alpha(tail: &[f64], xmin: f64) -> Option<f64> {
    let s: f64 = tail.iter().map(|&x| (x / xmin).ln()).sum();
    (s > 0.0).then(|| 1.0 + tail.len() as f64 / s)
}

/// KS distance of a sorted tail against the power-law CDF.
pub fn ks_distance(tail: &[f64], xmin: f64, alpha: f64) -> f64 {
    let n = tail.len() as f64;
    tail.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = 1.0 - (x / xmin).powf(1.0 - alpha);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

/// Fits `p(x) ∝ x^-α` for `x ≥ xmin`, sweeping `xmin` over the distinct
/// observed values and keeping the cutoff with the smallest KS distance.
pub fn power_law_fit(counts: &[f64]) -> Result<PowerLawFit> {
    let mut xs: Vec<f64> = counts.iter().copied().filter(|&x| x > 0.0).collect();
    if xs.len() < MIN_CATEGORIES {
        return Err(Error::PowerLaw(format!(
            "need at least {MIN_CATEGORIES} positive counts, got {}",
            xs.len()
        )));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::PowerLaw("non-finite count".into()));
    }
    xs.sort_by(f64::total_cmp);
    let mut starts: Vec<usize> = Vec::new();
    for i in 0..xs.len() {
        if (i == 0 || xs[i] != xs[i - 1]) && xs.len() - i >= MIN_TAIL {
            starts.push(i);
        }
    }
    // cap the sweep at ~1000 evenly spaced candidate cutoffs
    let stride = starts.len().div_ceil(1000).max(1);
    let mut best: Option<PowerLawFit> = None;
    for &i in starts.iter().step_by(stride) {
        let xmin = xs[i];
        let tail = &xs[i..];
        let Some(alpha) = mle_alpha(tail, xmin) else { continue };
        let ks = ks_distance(tail, xmin, alpha);
        if best.is_none_or(|b| ks < b.ks) {
            best = Some(PowerLawFit {
                alpha,
                xmin,
                ks,
                n_tail: tail.len(),
            });
        }
    }
    best.ok_or_else(|| Error::PowerLaw("degenerate counts: no spread above any cutoff".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Pareto};

    fn sample(alpha: f64, n: usize, seed: u64) -> Vec<f64> {
        let d = Pareto::new(1.0, alpha - 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn recovers_synthetic_exponents() {
        for (alpha, seed) in [(2.0, 1), (2.5, 2)] {
            let fit = power_law_fit(&sample(alpha, 10_000, seed)).unwrap();
            assert!((fit.alpha - alpha).abs() <= 0.1, "alpha {alpha}: {fit:?}");
        }
    }

    #[test]
    fn mle_closed_form() {
        // ln(e/1) + ln(e²/1) = 3 → 1 + 2/3
        let a = mle_alpha(&[std::f64::consts::E, std::f64::consts::E.powi(2)], 1.0).unwrap();
        assert!((a - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(power_law_fit(&[5.0; 50]).is_err());
        assert!(power_law_fit(&[1.0, 2.0, 3.0]).is_err());
    }
}
