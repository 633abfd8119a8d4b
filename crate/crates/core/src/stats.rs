//! Monte-Carlo summary statistics: means with standard errors, effective
//! sample sizes for correlated chains, log-space averages.

use serde::{Deserialize, Serialize};

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Mean and i.i.d. standard error.
pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    Estimate::new(mean(xs), (variance(xs) / n).sqrt())
}

/// Effective sample size via Geyer's initial positive sequence estimator.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let autocorr = |lag: usize| -> f64 {
        let s: f64 = centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum();
        s / n as f64 / c0
    };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = autocorr(2 * k) + autocorr(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    let tau = tau.max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}

/// Chain average with an ESS-adjusted standard error.
pub fn mean_se_ess(xs: &[f64]) -> Estimate {
    let ess = effective_sample_size(xs);
    Estimate::new(mean(xs), (variance(xs) / ess).sqrt())
}

/// `ln sum exp(x_i)` without overflow. Returns `-inf` for an empty or
/// all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln mean exp(x_i)` with a delta-method standard error.
pub fn log_mean_exp(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let value = log_sum_exp(xs) - n.ln();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Estimate::new(value, f64::NAN);
    }
    let scaled: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let est = mean_se(&scaled);
    let se = if est.value > 0.0 { est.se / est.value } else { f64::NAN };
    Estimate::new(value, se)
}

/// `ln(1 + e^x)` computed stably.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic critical value of the two-sample KS statistic at level 1%.
pub fn ks_critical_1pct(na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    1.628 * ((na + nb) / (na * nb)).sqrt()
}

pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_sum_exp_handles_large_values() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn ess_of_iid_is_near_n_and_ar1_is_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let iid: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 2500.0, "ess {ess}");
        let mut x = 0.0;
        let ar: Vec<f64> = (0..4000)
            .map(|_| {
                x = 0.9 * x + rng.random::<f64>() - 0.5;
                x
            })
            .collect();
        // tau = (1 + 0.9) / (1 - 0.9) = 19
        let ess = effective_sample_size(&ar);
        assert!(ess > 4000.0 / 40.0 && ess < 4000.0 / 8.0, "ess {ess}");
    }

    #[test]
    fn ks_identical_samples_is_zero() {
        let a = [0.1, 0.4, 0.3];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.1], &[1.0, 2.0]), 1.0);
    }

    #[test]
    fn softplus_matches_naive() {
        for x in [-20.0, -1.0, 0.0, 3.0, 30.0] {
            assert!((softplus(x) - (1.0 + f64::exp(x)).ln()).abs() < 1e-12);
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }
}
