//! Chain diagnostics: autocorrelation, integrated autocorrelation time,
//! moments with Monte Carlo standard errors and the HPD threshold summary.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Autocovariances `γ_0..γ_max_lag` of one series (biased, `1/T` normalization).
fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let scale = 1.0 / (len as f64 * n as f64);
    buf.iter().take(max_lag.min(n - 1) + 1).map(|c| c.re * scale).collect()
}

fn column(samples: &DMatrix<f64>, j: usize) -> Vec<f64> {
    samples.column(j).iter().copied().collect()
}

/// Per-coordinate sample autocorrelation for lags `0..=max_lag` (row k is lag k).
pub fn acf(samples: &DMatrix<f64>, max_lag: usize) -> Result<DMatrix<f64>> {
    let t = samples.nrows();
    if t <= max_lag {
        return Err(Error::Invalid(format!("{t} samples cannot give lag {max_lag}")));
    }
    let mut out = DMatrix::zeros(max_lag + 1, samples.ncols());
    for j in 0..samples.ncols() {
        let g = autocovariance(&column(samples, j), max_lag);
        if !(g[0] > 0.0) {
            return Err(Error::Invalid(format!("coordinate {j} is constant; autocorrelation undefined")));
        }
        out[(0, j)] = 1.0;
        for k in 1..=max_lag {
            out[(k, j)] = g[k] / g[0];
        }
    }
    Ok(out)
}

/// Truncation rule for summing autocorrelations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowRule {
    /// Geyer's initial positive sequence.
    #[default]
    InitialPositive,
    /// Geyer's initial monotone sequence (positive and non-increasing pair sums).
    InitialMonotone,
}

/// Integrated autocorrelation time of one series, `1 + 2 Σ_k ρ_k`.
/// A constant series carries no correlation information and gets 1.
pub fn iat_series(x: &[f64], rule: WindowRule) -> f64 {
    let n = x.len();
    if n < 4 {
        return 1.0;
    }
    let g = autocovariance(x, n - 1);
    if !(g[0] > 0.0) {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < g.len() {
        let mut pair = (g[2 * m] + g[2 * m + 1]) / g[0];
        if pair <= 0.0 {
            break;
        }
        if rule == WindowRule::InitialMonotone {
            pair = pair.min(prev);
            prev = pair;
        }
        sum += pair;
        m += 1;
    }
    (2.0 * sum - 1.0).max(f64::MIN_POSITIVE)
}

pub fn iat(samples: &DMatrix<f64>, rule: WindowRule) -> DVector<f64> {
    DVector::from_iterator(samples.ncols(), (0..samples.ncols()).map(|j| iat_series(&column(samples, j), rule)))
}

/// Moments of a chain with IAT-corrected standard errors of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `√(cov_jj · IAT_j / T)`.
    pub se: DVector<f64>,
    pub iat: DVector<f64>,
}

pub fn sample_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let t = samples.nrows().max(1) as f64;
    samples.row_sum().transpose() / t
}

/// Sample covariance with the `1/(T−1)` normalization (zero for a single row).
pub fn sample_cov(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let d = samples.ncols();
    let t = samples.nrows();
    if t < 2 {
        return DMatrix::zeros(d, d);
    }
    let mean = sample_mean(samples);
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (t as f64 - 1.0);
    crate::linalg::symmetrize(&mut cov);
    cov
}

pub fn moments_with_se(samples: &DMatrix<f64>) -> ChainSummary {
    let t = samples.nrows().max(1) as f64;
    let mean = sample_mean(samples);
    let cov = sample_cov(samples);
    let iat = iat(samples, WindowRule::InitialPositive);
    let se = DVector::from_fn(samples.ncols(), |j, _| (cov[(j, j)].max(0.0) * iat[j] / t).sqrt());
    ChainSummary { mean, cov, se, iat }
}

/// IAT-corrected standard error of every covariance entry, treating entry
/// (j, k) as the mean of the product series `(x_j − x̄_j)(x_k − x̄_k)`.
pub fn covariance_se(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let d = samples.ncols();
    let t = samples.nrows();
    let mean = sample_mean(samples);
    let mut out = DMatrix::zeros(d, d);
    for j in 0..d {
        for k in j..d {
            let prod: Vec<f64> = (0..t)
                .map(|r| (samples[(r, j)] - mean[j]) * (samples[(r, k)] - mean[k]))
                .collect();
            let pm = prod.iter().sum::<f64>() / t as f64;
            let var = prod.iter().map(|p| (p - pm) * (p - pm)).sum::<f64>() / (t as f64 - 1.0).max(1.0);
            let se = (var * iat_series(&prod, WindowRule::InitialPositive) / t as f64).sqrt();
            out[(j, k)] = se;
            out[(k, j)] = se;
        }
    }
    out
}

/// Type-7 (linear interpolation) empirical quantile.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Estimated HPD threshold and its relative error against a reference value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpdSummary {
    pub alpha: f64,
    pub eta_alpha: f64,
    pub rel_error: f64,
}

/// `η_α` = empirical `(1−α)`-quantile of `−log π` over the samples.
pub fn hpd_threshold(samples: &DMatrix<f64>, neg_log_post: impl Fn(&DVector<f64>) -> f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha = {alpha} is outside (0, 1)")));
    }
    if samples.nrows() == 0 {
        return Err(Error::Invalid("no samples".into()));
    }
    let vals: Vec<f64> = samples.row_iter().map(|r| neg_log_post(&r.transpose())).collect();
    Ok(quantile(&vals, 1.0 - alpha))
}

pub fn hpd_error(
    samples: &DMatrix<f64>,
    neg_log_post: impl Fn(&DVector<f64>) -> f64,
    alpha: f64,
    eta_true: f64,
) -> Result<HpdSummary> {
    let eta_alpha = hpd_threshold(samples, neg_log_post, alpha)?;
    Ok(HpdSummary {
        alpha,
        eta_alpha,
        rel_error: (eta_alpha - eta_true).abs() / eta_true.abs(),
    })
}

/// Negative log-posterior at every kept sample, in chain order.
pub fn neg_log_post_values(samples: &DMatrix<f64>, neg_log_post: impl Fn(&DVector<f64>) -> f64) -> Vec<f64> {
    samples.row_iter().map(|r| neg_log_post(&r.transpose())).collect()
}

/// Same as [`hpd_error`] but from precomputed [`neg_log_post_values`].
pub fn hpd_error_from_values(vals: &[f64], alpha: f64, eta_true: f64) -> Result<HpdSummary> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha = {alpha} is outside (0, 1)")));
    }
    if vals.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    let eta_alpha = quantile(vals, 1.0 - alpha);
    Ok(HpdSummary {
        alpha,
        eta_alpha,
        rel_error: (eta_alpha - eta_true).abs() / eta_true.abs(),
    })
}

/// Relative HPD error computed on growing prefixes of the chain, one entry per checkpoint.
pub fn hpd_error_trace(
    samples: &DMatrix<f64>,
    neg_log_post: impl Fn(&DVector<f64>) -> f64,
    alpha: f64,
    eta_true: f64,
    checkpoints: usize,
) -> Result<Vec<(usize, f64)>> {
    Ok(hpd_trace_from_values(&neg_log_post_values(samples, neg_log_post), alpha, eta_true, checkpoints))
}

pub fn hpd_trace_from_values(vals: &[f64], alpha: f64, eta_true: f64, checkpoints: usize) -> Vec<(usize, f64)> {
    let t = vals.len();
    let k = checkpoints.max(1).min(t.max(1));
    (1..=k)
        .map(|c| {
            let n = (t * c / k).max(1);
            let eta = quantile(&vals[..n], 1.0 - alpha);
            (n, (eta - eta_true).abs() / eta_true.abs())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid(t: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = stream(seed, 0);
        DMatrix::from_fn(t, d, |_, _| r.sample(StandardNormal))
    }

    fn ar1(t: usize, phi: f64, seed: u64) -> DMatrix<f64> {
        let mut r = stream(seed, 0);
        let s = (1.0 - phi * phi).sqrt();
        let mut x: f64 = r.sample(StandardNormal);
        DMatrix::from_fn(t, 1, |_, _| {
            x = phi * x + s * r.sample::<f64, _>(StandardNormal);
            x
        })
    }

    #[test]
    fn acf_iid_is_small_and_lag0_is_one() {
        let a = acf(&iid(100_000, 2, 1), 50).unwrap();
        for j in 0..2 {
            assert_eq!(a[(0, j)], 1.0);
            for k in 1..=50 {
                assert!(a[(k, j)].abs() < 0.02, "lag {k}: {}", a[(k, j)]);
            }
        }
    }

    #[test]
    fn acf_ar1_matches_closed_form() {
        let a = acf(&ar1(100_000, 0.9, 2), 10).unwrap();
        for k in 1..=10 {
            assert!((a[(k, 0)] - 0.9f64.powi(k as i32)).abs() < 0.03);
        }
    }

    #[test]
    fn acf_rejects_constant() {
        assert!(acf(&DMatrix::from_element(100, 1, 2.0), 5).is_err());
    }

    #[test]
    fn iat_iid_and_ar1() {
        let v = iat(&iid(100_000, 1, 3), WindowRule::InitialPositive)[0];
        assert!((0.8..=1.2).contains(&v), "{v}");
        let phi = 0.8;
        let v = iat(&ar1(200_000, phi, 4), WindowRule::InitialPositive)[0];
        let want = (1.0 + phi) / (1.0 - phi);
        assert!((v / want - 1.0).abs() < 0.15, "{v} vs {want}");
    }

    #[test]
    fn iat_doubles_when_samples_repeat() {
        let x = ar1(50_000, 0.5, 5);
        let rep = DMatrix::from_fn(100_000, 1, |i, _| x[(i / 2, 0)]);
        let a = iat(&x, WindowRule::InitialPositive)[0];
        let b = iat(&rep, WindowRule::InitialPositive)[0];
        assert!((b / a / 2.0 - 1.0).abs() < 0.1, "{a} {b}");
    }

    #[test]
    fn moments_basics() {
        let m = moments_with_se(&DMatrix::from_element(10, 2, 3.0));
        assert_eq!(m.cov, DMatrix::zeros(2, 2));
        let x = iid(100_000, 1, 6);
        let m = moments_with_se(&x);
        assert!(m.mean[0].abs() < 3.0 * (1.0 / 1e5f64).sqrt());
    }

    #[test]
    fn permutation_keeps_moments() {
        let x = ar1(2_000, 0.9, 7);
        let perm = DMatrix::from_fn(2_000, 1, |i, _| x[((i * 7919) % 2_000, 0)]);
        let a = moments_with_se(&x);
        let b = moments_with_se(&perm);
        approx::assert_relative_eq!(a.mean, b.mean, max_relative = 1e-12);
        approx::assert_relative_eq!(a.cov, b.cov, max_relative = 1e-10);
        assert!((a.iat[0] - b.iat[0]).abs() > 1.0);
    }

    #[test]
    fn hpd_median_of_standard_normal() {
        // −log φ(x) = x²/2 + log√(2π); at α = 0.5 the threshold sits at the |x|-median.
        let x = iid(200_000, 1, 8);
        let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let f = |v: &DVector<f64>| 0.5 * v[0] * v[0] + c;
        let eta = hpd_threshold(&x, f, 0.5).unwrap();
        let q = 0.674_489_750_196_081_7_f64; // Φ⁻¹(0.75)
        let want = 0.5 * q * q + c;
        assert!((eta - want).abs() / want < 2.0 / (2e5f64).sqrt(), "{eta} {want}");
        let s = hpd_error(&x, f, 0.5, want).unwrap();
        assert!(s.rel_error < 2.0 / (2e5f64).sqrt());
        assert!(hpd_threshold(&x, f, 1.0).is_err());
    }

    #[test]
    fn quantile_type7() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.9), 5.0);
    }
}
