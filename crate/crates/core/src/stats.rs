//! Monte Carlo summaries: compensated sums, moments, batch-means standard
//! errors, log-log slope fits and Kolmogorov–Smirnov statistics.

use serde::{Deserialize, Serialize};

/// Asymptotic Kolmogorov–Smirnov critical value at the 1% level.
pub const KS_CRITICAL_1PCT: f64 = 1.628;

/// Neumaier compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn sum(xs: &[f64]) -> f64 {
    let mut s = CompensatedSum::default();
    xs.iter().for_each(|&x| s.add(x));
    s.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum(xs) / xs.len() as f64
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let mut s = CompensatedSum::default();
    xs.iter().for_each(|&x| s.add((x - m) * (x - m)));
    (m, s.value() / (n - 1) as f64)
}

/// Sample moments of a replica ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let (mean, variance) = mean_var(xs);
        let central = |p: i32| {
            let mut s = CompensatedSum::default();
            xs.iter().for_each(|&x| s.add((x - mean).powi(p)));
            s.value() / n as f64
        };
        let m2 = central(2);
        let (skewness, excess_kurtosis) = if m2 > 0.0 {
            (central(3) / m2.powf(1.5), central(4) / (m2 * m2) - 3.0)
        } else {
            (0.0, 0.0)
        };
        Self { count: n, mean, variance, skewness, excess_kurtosis }
    }

    /// Standard error of the mean.
    pub fn mean_se(&self) -> f64 {
        (self.variance / self.count as f64).sqrt()
    }

    /// Standard error of the sample variance under normality.
    pub fn variance_se(&self) -> f64 {
        self.variance * (2.0 / (self.count as f64 - 1.0).max(1.0)).sqrt()
    }

    pub fn skewness_se(&self) -> f64 {
        (6.0 / self.count as f64).sqrt()
    }

    pub fn kurtosis_se(&self) -> f64 {
        (24.0 / self.count as f64).sqrt()
    }

    /// Moment-based normality test: `K² = z_skew² + z_kurt²` and its
    /// `χ²₂` p-value `exp(−K²/2)`.
    pub fn normality(&self) -> (f64, f64) {
        let zs = self.skewness / self.skewness_se();
        let zk = self.excess_kurtosis / self.kurtosis_se();
        let k2 = zs * zs + zk * zk;
        (k2, (-0.5 * k2).exp())
    }
}

/// Batch-means standard error of the mean with `batches` contiguous batches.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let n = xs.len();
    let b = batches.min(n).max(1);
    if b < 2 {
        return mean_var(xs).1.sqrt() / (n as f64).sqrt();
    }
    let size = n / b;
    let means: Vec<f64> = (0..b).map(|i| mean(&xs[i * size..(i + 1) * size])).collect();
    (mean_var(&means).1 / b as f64).sqrt()
}

/// Least-squares line `y = intercept + slope·x` with the slope standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

pub fn fit_slope(xs: &[f64], ys: &[f64]) -> SlopeFit {
    fit_slope_weighted(xs, ys, None)
}

/// Weighted least squares (weights `1/σ²`). Without weights the slope error
/// comes from the residual scatter; with weights it is `1/√(Σw (x − x̄)²)`.
pub fn fit_slope_weighted(xs: &[f64], ys: &[f64], sigma: Option<&[f64]>) -> SlopeFit {
    let n = xs.len();
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|&v| if v > 0.0 { 1.0 / (v * v) } else { 1.0 }).collect(),
        None => vec![1.0; n],
    };
    let sw = sum(&w);
    let xm = sum(&xs.iter().zip(&w).map(|(x, w)| x * w).collect::<Vec<_>>()) / sw;
    let ym = sum(&ys.iter().zip(&w).map(|(y, w)| y * w).collect::<Vec<_>>()) / sw;
    let sxx = sum(&(0..n).map(|i| w[i] * (xs[i] - xm).powi(2)).collect::<Vec<_>>());
    let sxy = sum(&(0..n).map(|i| w[i] * (xs[i] - xm) * (ys[i] - ym)).collect::<Vec<_>>());
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let slope_se = match sigma {
        Some(_) => (1.0 / sxx).sqrt(),
        None if n > 2 => {
            let rss: f64 = (0..n).map(|i| (ys[i] - intercept - slope * xs[i]).powi(2)).sum();
            (rss / (n - 2) as f64 / sxx).sqrt()
        }
        None => 0.0,
    };
    SlopeFit { slope, intercept, slope_se }
}

/// One-sample KS distance `sup |F_n − F|`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// True when the one-sample KS test does not reject at 1%.
pub fn ks_accepts(xs: &[f64], cdf: impl Fn(f64) -> f64) -> bool {
    ks_statistic(xs, cdf) * (xs.len() as f64).sqrt() <= KS_CRITICAL_1PCT
}

/// Two-sample KS distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// True when the two-sample KS test does not reject at 1%.
pub fn ks_two_sample_accepts(a: &[f64], b: &[f64]) -> bool {
    let (n, m) = (a.len() as f64, b.len() as f64);
    ks_two_sample(a, b) * (n * m / (n + m)).sqrt() <= KS_CRITICAL_1PCT
}
