//! Order-independent reductions and the small set of statistical tests used
//! by the Monte Carlo checks.

use serde::{Deserialize, Serialize};

use crate::rng::{tag, CounterRng};

/// Pairwise (cascade) summation; deterministic for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let stderr = if n > 1 {
            let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, stderr, n }
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr
    }
}

/// Sample standard deviation (n-1 normalization).
pub fn std_dev(xs: &[f64]) -> f64 {
    let e = MeanEstimate::from_samples(xs);
    e.stderr * (e.n as f64).sqrt()
}

/// Empirical quantile with linear interpolation; `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Asymptotic Kolmogorov tail `P(K > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Result of a Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl KsResult {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

/// One-sample KS test of `xs` against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> KsResult {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let en = n.sqrt();
    let p = kolmogorov_tail((en + 0.12 + 0.11 / en) * d);
    KsResult {
        statistic: d,
        p_value: p,
    }
}

/// Two-sample KS test; handles ties exactly.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> KsResult {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|p, q| p.total_cmp(q));
    b.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let en = ne.sqrt();
    KsResult {
        statistic: d,
        p_value: if d == 0.0 {
            1.0
        } else {
            kolmogorov_tail((en + 0.12 + 0.11 / en) * d)
        },
    }
}

/// Bootstrap standard error of the mean of `xs`, with deterministic resampling.
pub fn bootstrap_stderr(xs: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = xs.len();
    if n < 2 || resamples < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut rng = CounterRng::from_words(&[seed, tag::BOOTSTRAP, b as u64]);
            let draw: Vec<f64> = (0..n).map(|_| xs[rng.below(n as u64) as usize]).collect();
            pairwise_sum(&draw) / n as f64
        })
        .collect();
    std_dev(&means)
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, stderr_a, stderr_b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    weighted_linear_fit(x, y, &vec![1.0; x.len()])
}

/// Weighted least squares `y = a + b x` with weights `w`. Standard errors use
/// the residual scatter when the weights are uniform and the weights as
/// inverse variances otherwise.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let sy: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| a * a * b).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| a * c * b).sum();
    let det = sw * sxx - sx * sx;
    let b = (sw * sxy - sx * sy) / det;
    let a = (sy - b * sx) / sw;
    let uniform = w.iter().all(|&v| (v - w[0]).abs() < 1e-300);
    let (var_a, var_b) = if uniform {
        let n = x.len() as f64;
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(xi, yi)| (yi - a - b * xi).powi(2))
            .sum();
        let s2 = if n > 2.0 { rss / (n - 2.0) } else { f64::NAN };
        (s2 * sxx / det, s2 * sw / det)
    } else {
        (sxx / det, sw / det)
    };
    (a, b, var_a.sqrt(), var_b.sqrt())
}
