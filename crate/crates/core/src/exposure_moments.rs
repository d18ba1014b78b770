//! Daily exposure moment triples and log-normal moment matching.
//!
//! The third-order term has two wired definitions (see [`Lambda3Rule`]):
//! the ratio form `(λ2/λ1)(λ2/λ1 + 3)`, the conventional choice for this
//! model family, and the exact third central moment of the moment-matched
//! log-normal. Both are multiplied by `γ³/6` in the mean function, so the
//! numerical difference is negligible at air-pollution effect sizes;
//! keeping both wired lets that negligibility be asserted rather than
//! assumed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-day summary of the exposure distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyMoments {
    /// Mean exposure, μg/m³.
    pub lambda1: f64,
    /// Unbiased sample variance, (μg/m³)².
    pub lambda2: f64,
    /// Third-order term under the chosen [`Lambda3Rule`].
    pub lambda3: f64,
    /// Number of exposure samples behind the summary.
    pub k: usize,
}

/// How the third-order term is computed from (λ1, λ2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lambda3Rule {
    /// `(λ2/λ1)(λ2/λ1 + 3)`.
    #[default]
    Ratio,
    /// True third central moment of the moment-matched log-normal.
    Exact,
}

impl Lambda3Rule {
    pub fn lambda3(self, mean: f64, variance: f64) -> Result<f64> {
        match self {
            Lambda3Rule::Ratio => lambda3_ratio(mean, variance),
            Lambda3Rule::Exact => exact_third_central_moment(mean, variance),
        }
    }
}

/// The ratio-form third-order term `(λ2/λ1)(λ2/λ1 + 3)`.
pub fn lambda3_ratio(mean: f64, variance: f64) -> Result<f64> {
    if mean <= 0.0 {
        return Err(Error::NonPositiveMean(mean));
    }
    let r = variance / mean;
    Ok(r * (r + 3.0))
}

/// Exact third central moment of the log-normal matched to (mean, variance):
/// `(v/m² + 3) · v²/m`.
pub fn exact_third_central_moment(mean: f64, variance: f64) -> Result<f64> {
    if mean <= 0.0 {
        return Err(Error::NonPositiveMean(mean));
    }
    if variance < 0.0 {
        return Err(Error::NegativeVariance(variance));
    }
    Ok((variance / (mean * mean) + 3.0) * variance * variance / mean)
}

/// Summarize one day's exposure samples as a moment triple.
pub fn sample_moments(samples: &[f64], rule: Lambda3Rule) -> Result<DailyMoments> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let k = samples.len();
    let mean = samples.iter().sum::<f64>() / k as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
    let lambda3 = rule.lambda3(mean, var)?;
    Ok(DailyMoments {
        lambda1: mean,
        lambda2: var,
        lambda3,
        k,
    })
}

/// Log-normal in log-scale parameters: `ln X ~ N(m, s2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParams {
    pub m: f64,
    pub s2: f64,
}

/// Exact moment match: the log-normal whose mean and variance equal the
/// given values.
pub fn lognormal_from_moments(mean: f64, variance: f64) -> Result<LogNormalParams> {
    if mean <= 0.0 {
        return Err(Error::NonPositiveMean(mean));
    }
    if variance < 0.0 {
        return Err(Error::NegativeVariance(variance));
    }
    let s2 = (1.0 + variance / (mean * mean)).ln();
    let m = mean.ln() - s2 / 2.0;
    Ok(LogNormalParams { m, s2 })
}

/// Mean and variance of a log-normal given its log-scale parameters.
pub fn moments_from_lognormal(params: LogNormalParams) -> (f64, f64) {
    let mean = (params.m + params.s2 / 2.0).exp();
    let variance = mean * mean * (params.s2.exp() - 1.0);
    (mean, variance)
}

/// Log-density of one log-normal observation.
pub fn lognormal_logpdf(x: f64, params: LogNormalParams) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::NonPositiveSample(x));
    }
    if params.s2 <= 0.0 {
        return Err(Error::Invalid(format!(
            "log-normal scale must be positive, got s2 = {}",
            params.s2
        )));
    }
    let lx = x.ln();
    let z = lx - params.m;
    Ok(-lx - 0.5 * (2.0 * std::f64::consts::PI * params.s2).ln() - z * z / (2.0 * params.s2))
}

/// Sum of log-normal log-densities over a day's samples.
pub fn lognormal_loglik(samples: &[f64], params: LogNormalParams) -> Result<f64> {
    let mut total = 0.0;
    for &x in samples {
        total += lognormal_logpdf(x, params)?;
    }
    Ok(total)
}

/// Sufficient statistics of one day's samples for the exposure likelihood,
/// under either distributional family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayStats {
    pub k: usize,
    pub sum: f64,
    pub sum_sq: f64,
    /// `Σ ln x`; NaN when any sample is nonpositive.
    pub log_sum: f64,
    /// `Σ (ln x)²`; NaN when any sample is nonpositive.
    pub log_sum_sq: f64,
    pub mean: f64,
    pub var: f64,
}

impl DayStats {
    pub fn from_samples(samples: &[f64]) -> Result<DayStats> {
        if samples.len() < 2 {
            return Err(Error::TooFewSamples {
                need: 2,
                got: samples.len(),
            });
        }
        let k = samples.len();
        let sum: f64 = samples.iter().sum();
        let sum_sq: f64 = samples.iter().map(|x| x * x).sum();
        let mean = sum / k as f64;
        let var = (sum_sq - sum * mean).max(0.0) / (k as f64 - 1.0);
        let (mut log_sum, mut log_sum_sq) = (0.0, 0.0);
        let mut positive = true;
        for &x in samples {
            if x <= 0.0 {
                positive = false;
                break;
            }
            let lx = x.ln();
            log_sum += lx;
            log_sum_sq += lx * lx;
        }
        if !positive {
            log_sum = f64::NAN;
            log_sum_sq = f64::NAN;
        }
        Ok(DayStats {
            k,
            sum,
            sum_sq,
            log_sum,
            log_sum_sq,
            mean,
            var,
        })
    }

    /// Log-normal day log-likelihood evaluated through the sufficient
    /// statistics; equals [`lognormal_loglik`] over the raw samples.
    pub fn lognormal_loglik(&self, params: LogNormalParams) -> Result<f64> {
        if self.log_sum.is_nan() {
            return Err(Error::NonPositiveSample(0.0));
        }
        if params.s2 <= 0.0 {
            return Err(Error::Invalid(format!(
                "log-normal scale must be positive, got s2 = {}",
                params.s2
            )));
        }
        let n = self.k as f64;
        let quad = self.log_sum_sq - 2.0 * params.m * self.log_sum + n * params.m * params.m;
        Ok(-self.log_sum
            - 0.5 * n * (2.0 * std::f64::consts::PI * params.s2).ln()
            - quad / (2.0 * params.s2))
    }

    /// Normal day log-likelihood through the sufficient statistics.
    pub fn normal_loglik(&self, mean: f64, variance: f64) -> Result<f64> {
        if variance <= 0.0 {
            return Err(Error::Invalid(format!(
                "normal variance must be positive, got {variance}"
            )));
        }
        let n = self.k as f64;
        let quad = self.sum_sq - 2.0 * mean * self.sum + n * mean * mean;
        Ok(-0.5 * n * (2.0 * std::f64::consts::PI * variance).ln() - quad / (2.0 * variance))
    }
}
