//! Descriptive statistics for return series: moments, Jarque-Bera normality,
//! sample autocorrelation and the Ljung-Box portmanteau statistic.
//!
//! Central moments divide by `n`. Kurtosis is reported in excess of 3.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;

/// Number of lags in the reported Ljung-Box statistic.
pub const LJUNG_BOX_LAGS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum StatsError {
    #[error("series has {n} observations, at least {min} are required")]
    TooShort { n: usize, min: usize },
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("lag {lag} is not below the series length {n}")]
    LagTooLarge { lag: usize, n: usize },
    #[error("series contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    pub jb_p: f64,
    pub autocorr1: f64,
    pub ljung_box_12: f64,
    pub lb_p: f64,
}

struct Moments {
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

fn moments(x: &[f64]) -> Result<Moments, StatsError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    if x.is_empty() || x.iter().all(|&v| v == x[0]) {
        return Err(StatsError::ZeroVariance);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    if !(m2 > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    Ok(Moments { mean, m2: m2 / n, m3: m3 / n, m4: m4 / n })
}

/// Table of descriptive statistics for one series.
pub fn describe(x: &[f64]) -> Result<StatsSummary, StatsError> {
    let min = LJUNG_BOX_LAGS + 1;
    if x.len() < min {
        return Err(StatsError::TooShort { n: x.len(), min });
    }
    let m = moments(x)?;
    let n = x.len() as f64;
    let skewness = m.m3 / (m.m2 * math::sqrt(m.m2));
    let excess_kurtosis = m.m4 / (m.m2 * m.m2) - 3.0;
    let jarque_bera = n / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0);
    let acf = autocorrelations(x, &m, LJUNG_BOX_LAGS);
    let ljung_box_12 = ljung_box_from_acf(&acf, x.len());
    Ok(StatsSummary {
        n: x.len(),
        mean: m.mean,
        std: math::sqrt(m.m2),
        skewness,
        excess_kurtosis,
        jarque_bera,
        jb_p: chi_squared_sf(jarque_bera, 2.0),
        autocorr1: acf[1],
        ljung_box_12,
        lb_p: chi_squared_sf(ljung_box_12, LJUNG_BOX_LAGS as f64),
    })
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> Result<f64, StatsError> {
    if lag >= x.len() {
        return Err(StatsError::LagTooLarge { lag, n: x.len() });
    }
    let m = moments(x)?;
    Ok(autocorrelations(x, &m, lag)[lag])
}

/// Ljung-Box statistic over lags `1..=lags`, with its chi-squared p-value.
pub fn ljung_box(x: &[f64], lags: usize) -> Result<(f64, f64), StatsError> {
    if lags >= x.len() {
        return Err(StatsError::LagTooLarge { lag: lags, n: x.len() });
    }
    let m = moments(x)?;
    let q = ljung_box_from_acf(&autocorrelations(x, &m, lags), x.len());
    Ok((q, chi_squared_sf(q, lags as f64)))
}

fn autocorrelations(x: &[f64], m: &Moments, max_lag: usize) -> alloc::vec::Vec<f64> {
    let denom = m.m2 * x.len() as f64;
    (0..=max_lag)
        .map(|k| {
            if k == 0 {
                return 1.0;
            }
            let num: f64 = (k..x.len()).map(|t| (x[t] - m.mean) * (x[t - k] - m.mean)).sum();
            num / denom
        })
        .collect()
}

fn ljung_box_from_acf(acf: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let s: f64 = acf.iter().enumerate().skip(1).map(|(k, r)| r * r / (nf - k as f64)).sum();
    nf * (nf + 2.0) * s
}

/// Upper tail probability of a chi-squared variate with `dof` degrees of
/// freedom.
pub fn chi_squared_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5 * dof, 0.5 * x)
}

/// Regularised upper incomplete gamma function `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..1000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * math::exp(-x + a * math::ln(x) - math::lgamma(a))
}

// Modified Lentz evaluation.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    math::exp(-x + a * math::ln(x) - math::lgamma(a)) * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn constant_series_has_zero_variance() {
        assert_eq!(describe(&[2.5; 40]), Err(StatsError::ZeroVariance));
        assert_eq!(autocorrelation(&[1.0; 5], 1), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn too_short() {
        assert_eq!(describe(&[1.0, 2.0, 3.0]), Err(StatsError::TooShort { n: 3, min: 13 }));
    }

    #[test]
    fn alternating_series_is_symmetric() {
        let x: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = describe(&x).unwrap();
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.autocorr1, -39.0 / 40.0);
    }

    #[test]
    fn lag_zero_is_one_and_lag_bounds() {
        let x = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(autocorrelation(&x, 0).unwrap(), 1.0);
        assert_eq!(autocorrelation(&x, 4), Err(StatsError::LagTooLarge { lag: 4, n: 4 }));
    }

    #[test]
    fn white_noise_autocorrelation_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        assert!(autocorrelation(&x, 1).unwrap().abs() < 0.05);
    }

    #[test]
    fn chi_squared_tail_matches_statrs() {
        for &dof in &[1.0, 2.0, 5.0, 12.0, 40.0] {
            let d = ChiSquared::new(dof).unwrap();
            for &x in &[0.01, 0.5, 1.0, 2.0, 7.5, 12.0, 21.0, 60.0, 150.0] {
                let ours = chi_squared_sf(x, dof);
                let theirs = d.sf(x);
                assert!(
                    (ours - theirs).abs() <= 1e-12 + 1e-9 * theirs,
                    "dof {dof} x {x}: {ours} vs {theirs}"
                );
            }
        }
        assert_eq!(chi_squared_sf(0.0, 2.0), 1.0);
        // Q(1, x) = exp(-x)
        assert!((gamma_q(1.0, 3.0) - (-3.0f64).exp()).abs() < 1e-15);
    }
}
