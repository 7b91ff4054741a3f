//! Scalar random sources: the distribution kinds allowed for coefficient
//! parameters and initial-state sources, their raw moments, and
//! deterministic inverse-CDF sampling.

use std::collections::HashMap;
use std::sync::{LazyLock, Mutex};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::quad;

/// A scalar distribution for coefficient parameters and initial-state sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarDistribution {
    Point {
        value: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gaussian {
        mean: f64,
        stddev: f64,
    },
    TruncatedGaussian {
        mean: f64,
        stddev: f64,
        lo: f64,
        hi: f64,
    },
    Finite {
        values: Vec<f64>,
        probabilities: Vec<f64>,
    },
}

impl ScalarDistribution {
    pub fn point(value: f64) -> Self {
        ScalarDistribution::Point { value }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        ScalarDistribution::Uniform { lo, hi }
    }

    pub fn gaussian(mean: f64, stddev: f64) -> Self {
        ScalarDistribution::Gaussian { mean, stddev }
    }

    pub fn truncated_gaussian(mean: f64, stddev: f64, lo: f64, hi: f64) -> Self {
        ScalarDistribution::TruncatedGaussian { mean, stddev, lo, hi }
    }

    pub fn finite(values: Vec<f64>, probabilities: Vec<f64>) -> Self {
        ScalarDistribution::Finite { values, probabilities }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarDistribution::Point { value } => {
                if !value.is_finite() {
                    return Err(Error::validation("point value must be finite"));
                }
            }
            ScalarDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::validation(format!(
                        "uniform requires lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            ScalarDistribution::Gaussian { mean, stddev } => {
                if !(mean.is_finite() && stddev.is_finite() && *stddev > 0.0) {
                    return Err(Error::validation(format!(
                        "gaussian requires finite mean and stddev > 0, got ({mean}, {stddev})"
                    )));
                }
            }
            ScalarDistribution::TruncatedGaussian { mean, stddev, lo, hi } => {
                if !(mean.is_finite() && stddev.is_finite() && *stddev > 0.0) {
                    return Err(Error::validation(format!(
                        "truncated_gaussian requires stddev > 0, got {stddev}"
                    )));
                }
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::validation(format!(
                        "truncated_gaussian requires lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            ScalarDistribution::Finite { values, probabilities } => {
                if values.is_empty() || values.len() != probabilities.len() {
                    return Err(Error::validation(
                        "finite distribution needs matching non-empty values/probabilities",
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("finite values must be finite"));
                }
                if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::validation("probabilities must be non-negative"));
                }
                let sum: f64 = probabilities.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::ProbabilitySum { sum });
                }
            }
        }
        Ok(())
    }

    /// Support interval [min, max]; the Gaussian support is unbounded.
    pub fn support(&self) -> (f64, f64) {
        match self {
            ScalarDistribution::Point { value } => (*value, *value),
            ScalarDistribution::Uniform { lo, hi } => (*lo, *hi),
            ScalarDistribution::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            ScalarDistribution::TruncatedGaussian { lo, hi, .. } => (*lo, *hi),
            ScalarDistribution::Finite { values, .. } => {
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    /// Finite-support value/probability pairs, if this distribution has them.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            ScalarDistribution::Point { value } => Some(vec![(*value, 1.0)]),
            ScalarDistribution::Finite { values, probabilities } => Some(
                values
                    .iter()
                    .cloned()
                    .zip(probabilities.iter().cloned())
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Inverse-CDF transform of u in [0,1); rejection-free by construction.
    pub fn sample_from_uniform(&self, u: f64) -> f64 {
        match self {
            ScalarDistribution::Point { value } => *value,
            ScalarDistribution::Uniform { lo, hi } => lo + u * (hi - lo),
            ScalarDistribution::Gaussian { mean, stddev } => {
                let n = Normal::new(*mean, *stddev).unwrap();
                n.inverse_cdf(u.clamp(1e-16, 1.0 - 1e-16))
            }
            ScalarDistribution::TruncatedGaussian { mean, stddev, lo, hi } => {
                let n = Normal::new(*mean, *stddev).unwrap();
                let (clo, chi) = (n.cdf(*lo), n.cdf(*hi));
                let v = n.inverse_cdf((clo + u * (chi - clo)).clamp(1e-16, 1.0 - 1e-16));
                v.clamp(*lo, *hi)
            }
            ScalarDistribution::Finite { values, probabilities } => {
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probabilities) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().unwrap()
            }
        }
    }
}

/// Cache key: distribution fingerprint plus moment order.
fn fingerprint(d: &ScalarDistribution) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let tag_bits = |h: &mut std::collections::hash_map::DefaultHasher, tag: u8, vs: &[f64]| {
        tag.hash(h);
        for v in vs {
            v.to_bits().hash(h);
        }
    };
    match d {
        ScalarDistribution::Point { value } => tag_bits(&mut h, 0, &[*value]),
        ScalarDistribution::Uniform { lo, hi } => tag_bits(&mut h, 1, &[*lo, *hi]),
        ScalarDistribution::Gaussian { mean, stddev } => tag_bits(&mut h, 2, &[*mean, *stddev]),
        ScalarDistribution::TruncatedGaussian { mean, stddev, lo, hi } => {
            tag_bits(&mut h, 3, &[*mean, *stddev, *lo, *hi])
        }
        ScalarDistribution::Finite { values, probabilities } => {
            tag_bits(&mut h, 4, values);
            tag_bits(&mut h, 5, probabilities);
        }
    }
    h.finish()
}

static MOMENT_CACHE: LazyLock<Mutex<HashMap<(u64, u32), f64>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// E[w^k]. Closed forms where available; adaptive Gauss-Legendre quadrature
/// (node doubling to absolute tolerance 1e-12) for the truncated Gaussian.
pub fn raw_moment(d: &ScalarDistribution, k: u32) -> Result<f64> {
    if k == 0 {
        return Ok(1.0);
    }
    let key = (fingerprint(d), k);
    if let Some(&v) = MOMENT_CACHE.lock().unwrap().get(&key) {
        return Ok(v);
    }
    let v = match d {
        ScalarDistribution::Point { value } => value.powi(k as i32),
        ScalarDistribution::Uniform { lo, hi } => {
            // (hi^{k+1} - lo^{k+1}) / ((k+1)(hi - lo))
            (hi.powi(k as i32 + 1) - lo.powi(k as i32 + 1)) / ((k as f64 + 1.0) * (hi - lo))
        }
        ScalarDistribution::Gaussian { mean, stddev } => gaussian_raw_moment(*mean, *stddev, k),
        ScalarDistribution::TruncatedGaussian { mean, stddev, lo, hi } => {
            truncated_gaussian_raw_moment(*mean, *stddev, *lo, *hi, k)?
        }
        ScalarDistribution::Finite { values, probabilities } => values
            .iter()
            .zip(probabilities)
            .map(|(v, p)| p * v.powi(k as i32))
            .sum(),
    };
    MOMENT_CACHE.lock().unwrap().insert(key, v);
    Ok(v)
}

/// E[(mean + stddev Z)^k] by binomial expansion over central moments.
fn gaussian_raw_moment(mean: f64, stddev: f64, k: u32) -> f64 {
    // E[Z^i] = (i-1)!! for even i, 0 for odd i.
    let mut acc = 0.0;
    let mut binom = 1.0f64; // C(k, i)
    for i in 0..=k {
        if i % 2 == 0 {
            let mut dfact = 1.0f64;
            let mut m = i as i64 - 1;
            while m > 1 {
                dfact *= m as f64;
                m -= 2;
            }
            acc += binom * mean.powi((k - i) as i32) * stddev.powi(i as i32) * dfact;
        }
        binom = binom * (k - i) as f64 / (i as f64 + 1.0);
    }
    acc
}

fn truncated_gaussian_raw_moment(mean: f64, stddev: f64, lo: f64, hi: f64, k: u32) -> Result<f64> {
    let n = Normal::new(mean, stddev).map_err(|e| Error::validation(e.to_string()))?;
    let z = n.cdf(hi) - n.cdf(lo);
    if z <= 0.0 {
        return Err(Error::validation(
            "truncated_gaussian has vanishing mass on [lo, hi]",
        ));
    }
    let pdf = |x: f64| {
        let t = (x - mean) / stddev;
        (-0.5 * t * t).exp() / (stddev * (2.0 * std::f64::consts::PI).sqrt())
    };
    let start = (k as usize) / 2 + 8;
    let v = quad::converge_doubling(
        |nodes| quad::integrate_legendre(|x| x.powi(k as i32) * pdf(x), lo, hi, nodes),
        start,
        1e-12,
        &format!("truncated_gaussian moment of order {k}"),
    )?;
    Ok(v / z)
}
