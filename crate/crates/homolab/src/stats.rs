//! Deterministic reductions and small statistical helpers.

use rayon::prelude::*;

const LEAF: usize = 64;
/// Work-unit size for parallel reductions. Fixed so that the summation tree
/// never depends on the number of workers.
pub const CHUNK: usize = 4096;

/// Pairwise summation with a fixed tree shape.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= LEAF {
        let mut s = 0.0;
        for v in x {
            s += v;
        }
        s
    } else {
        let mid = x.len() / 2;
        pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
    }
}

/// Sum of `f(i)` for `i < n`, evaluated in parallel fixed-size chunks and
/// combined pairwise. Bit-identical for any thread count.
pub fn par_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let vals: Vec<f64> = (lo..hi).map(&f).collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&partial)
}

/// Dot product with the deterministic chunked reduction.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    par_sum(a.len(), |i| a[i] * b[i])
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    // shifted by the first sample: exact for constant data
    let shifted: Vec<f64> = x.iter().map(|v| v - x[0]).collect();
    x[0] + pairwise_sum(&shifted) / x.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let m = mean(x);
    if n < 2 {
        return (m, f64::NAN);
    }
    let dev: Vec<f64> = x.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    let m = mean(x);
    let dev: Vec<f64> = x.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&dev) / (n as f64 - 1.0)
}

/// Unbiased estimate of `(E X)^2` from i.i.d. samples: `(S^2 - sum x^2) / (n(n-1))`.
pub fn squared_mean_unbiased(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let s = pairwise_sum(x);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    (s * s - pairwise_sum(&sq)) / (n * (n - 1.0))
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let sxx = pairwise_sum(&sxx);
    let slope = if sxx > 0.0 { pairwise_sum(&sxy) / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov-Smirnov distance between the samples and `N(0, sd^2)`.
pub fn ks_normal(samples: &[f64], sd: f64) -> f64 {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in s.iter().enumerate() {
        let f = normal_cdf(v / sd);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let (p, pm) = (p1, p0);
            dp = n as f64 * (z * p - pm) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_sum_matches_plain_sum() {
        let n = 100_003;
        let s = par_sum(n, |i| i as f64);
        assert_eq!(s, (n as f64 - 1.0) * n as f64 / 2.0);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((integral - 2.0 / 15.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn unbiased_square_of_mean() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let m = 2.5_f64;
        let v = variance(&x);
        assert!((squared_mean_unbiased(&x) - (m * m - v / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let (s, c) = linear_fit(&x, &y);
        assert!((s - 3.0).abs() < 1e-14 && (c + 1.0).abs() < 1e-14);
    }
}
