//! Small statistics helpers shared by the checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

/// A Monte Carlo mean with its standard error.
///
/// The standard error uses the unbiased sample variance; with a single
/// sample it is infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Running mean and variance (Welford).
#[derive(Clone, Debug, Default)]
pub struct MeanAccumulator {
    count: usize,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn finish(&self) -> McEstimate {
        let stderr = if self.count < 2 {
            f64::INFINITY
        } else {
            (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
        };
        McEstimate {
            mean: self.mean,
            stderr,
            samples: self.count,
        }
    }
}

pub fn std_normal_cdf(t: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("valid").cdf(t)
}

/// Mass of a standard Gaussian inside `[-c, c]`.
pub fn gaussian_band_mass(c: f64) -> f64 {
    2.0 * std_normal_cdf(c) - 1.0
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Empirical quantile with linear interpolation; `values` need not be sorted.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Exact one-sided binomial p-value `P(X ≤ successes)` under success rate `p`.
pub fn binomial_lower_tail(successes: u64, trials: u64, p: f64) -> f64 {
    Binomial::new(p, trials).expect("valid").cdf(successes)
}

/// `z`-sigma lower floor for a frequency whose true value is at least `p`.
pub fn frequency_floor(p: f64, trials: usize, z: f64) -> f64 {
    p - z * (p * (1.0 - p) / trials as f64).sqrt()
}
