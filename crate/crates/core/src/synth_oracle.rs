//! Synthetic datasets with known ground truth, plus brute-force Monte
//! Carlo oracles used across the test suites.
//!
//! Generated ambient series follow a yearly sinusoid plus noise so the
//! spline covariates have real structure to absorb; daily personal
//! exposure means attenuate the ambient average linearly; counts are
//! Poisson draws from the exact mean function evaluated at the recorded
//! truth.

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_io::{spatial_average, HealthSeries, MonitorPanel, SiteRecord};
use crate::error::{Error, Result};
use crate::exposure_moments::{lognormal_from_moments, DailyMoments, Lambda3Rule};
use crate::mean_models::MeanStrategy;
use crate::micro_sim::{ExposurePanel, PanelColumn};
use crate::spline_basis::{natural_cubic_basis, standardize, SplineBasis};

/// Distribution for `E[exp(γX)]` Monte Carlo estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MgfLaw {
    Normal { mean: f64, var: f64 },
    /// Log-normal moment-matched to the given mean and variance.
    LogNormalMoments { mean: f64, var: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Monte Carlo `E[exp(γX)]` with its standard error. Intended for
/// `n_draws ≥ 10⁵` when used as an oracle; deterministic given the seed.
pub fn mc_expectation_exp(law: &MgfLaw, gamma: f64, n_draws: usize, seed: u64) -> McEstimate {
    if gamma == 0.0 {
        // exp(0·X) = 1 exactly, zero variance.
        return McEstimate {
            mean: 1.0,
            se: 0.0,
            n: n_draws,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut draw: Box<dyn FnMut(&mut ChaCha8Rng) -> f64> = match *law {
        MgfLaw::Normal { mean, var } => {
            let normal = Normal::new(mean, var.sqrt()).expect("valid normal");
            Box::new(move |rng| normal.sample(rng))
        }
        MgfLaw::LogNormalMoments { mean, var } => {
            let params = lognormal_from_moments(mean, var).expect("valid moments");
            let normal = Normal::new(params.m, params.s2.sqrt()).expect("valid normal");
            Box::new(move |rng| normal.sample(rng).exp())
        }
        MgfLaw::Fixed { value } => Box::new(move |_| value),
    };
    for _ in 0..n_draws {
        let v = (gamma * draw(&mut rng)).exp();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = ((sum_sq - sum * mean) / (n - 1.0)).max(0.0);
    McEstimate {
        mean,
        se: (var / n).sqrt(),
        n: n_draws,
    }
}

/// Daily exposure-generation law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum ExposureLaw {
    /// Log-normal with day-varying moments; `cv` is the within-day
    /// coefficient of variation.
    LogNormal { cv: f64 },
    /// Normal with day-varying moments (draws clamped at zero).
    Normal { cv: f64 },
    /// Degenerate: every individual sees the day mean.
    Fixed,
}

/// A fully specified synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthScenario {
    pub days: usize,
    pub sites: usize,
    pub reps_per_site: usize,
    /// Log relative risk per unit of exposure.
    pub gamma: f64,
    /// True covariate coefficients `[intercept, time spline…, temp spline…]`
    /// in the standardized basis; sized defaults are used when absent.
    pub alpha: Option<Vec<f64>>,
    pub time_df: usize,
    pub temp_df: usize,
    pub law: ExposureLaw,
    /// Personal day mean = `theta + phi · ambient average (+ noise)`.
    pub theta: f64,
    pub phi: f64,
    pub lag: usize,
    pub ambient_mean: f64,
    pub ambient_amplitude: f64,
    pub ambient_noise_sd: f64,
    pub day_noise_sd: f64,
    /// Intercept of the log mean (ln of baseline expected counts).
    pub baseline_log_mean: f64,
    pub lambda3: Lambda3Rule,
    pub seed: u64,
}

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario {
            days: 363,
            sites: 8,
            reps_per_site: 100,
            gamma: 0.005,
            alpha: None,
            time_df: 6,
            temp_df: 2,
            law: ExposureLaw::LogNormal { cv: 0.25 },
            theta: 0.83,
            phi: 0.40,
            lag: 2,
            ambient_mean: 26.0,
            ambient_amplitude: 9.0,
            ambient_noise_sd: 4.0,
            day_noise_sd: 0.4,
            baseline_log_mean: 3.2,
            lambda3: Lambda3Rule::Ratio,
            seed: 1997,
        }
    }
}

impl SynthScenario {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<SynthScenario> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    /// The mean-function strategy matching the generation law.
    pub fn strategy(&self) -> MeanStrategy {
        match self.law {
            ExposureLaw::LogNormal { .. } => MeanStrategy::LognormalTaylor,
            ExposureLaw::Normal { .. } => MeanStrategy::NormalExact,
            ExposureLaw::Fixed => MeanStrategy::Fixed,
        }
    }

    fn cv(&self) -> f64 {
        match self.law {
            ExposureLaw::LogNormal { cv } | ExposureLaw::Normal { cv } => cv,
            ExposureLaw::Fixed => 0.0,
        }
    }

    fn default_alpha(&self) -> Vec<f64> {
        let mut alpha = vec![self.baseline_log_mean];
        let time_pattern = [0.12, -0.08, 0.06, -0.05, 0.04, 0.03, -0.02, 0.02, 0.015, -0.01, 0.01];
        for j in 0..self.time_df {
            alpha.push(time_pattern[j % time_pattern.len()]);
        }
        let temp_pattern = [-0.06, 0.03];
        for j in 0..self.temp_df {
            alpha.push(temp_pattern[j % temp_pattern.len()]);
        }
        alpha
    }
}

/// Everything the generator knows that a fit must recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub gamma: f64,
    pub alpha: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub theta: f64,
    pub phi: f64,
    /// exp(10·γ): the relative-risk anchor for a 10 μg/m³ increment.
    pub rr10: f64,
    pub seed: u64,
}

/// A generated world: inputs for every pipeline stage plus the truth record.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub monitor: MonitorPanel,
    pub panel: ExposurePanel,
    pub health: HealthSeries,
    pub truth: SynthTruth,
    /// Standardized design used for generation: intercept, time, temperature.
    pub design: Vec<Vec<f64>>,
    pub time_basis: SplineBasis,
    pub temp_basis: SplineBasis,
}

/// Build the standardized design matrix (intercept + time and temperature
/// splines) for a health series; both the generator and the fit go through
/// this one path so their covariates agree bit for bit.
pub fn build_design(
    health: &HealthSeries,
    time_df: usize,
    temp_df: usize,
) -> Result<(Vec<Vec<f64>>, SplineBasis, SplineBasis)> {
    let t: Vec<f64> = (0..health.n_days()).map(|i| i as f64).collect();
    let time_basis = standardize(&natural_cubic_basis(&t, time_df, "time")?)?;
    let temp_basis = standardize(&natural_cubic_basis(
        &health.temp_mean,
        temp_df,
        "temperature",
    )?)?;
    let design = (0..health.n_days())
        .map(|i| {
            let mut row = Vec::with_capacity(1 + time_df + temp_df);
            row.push(1.0);
            row.extend_from_slice(&time_basis.matrix[i]);
            row.extend_from_slice(&temp_basis.matrix[i]);
            row
        })
        .collect();
    Ok((design, time_basis, temp_basis))
}

/// Generate a complete synthetic dataset from a scenario.
pub fn generate(scenario: &SynthScenario) -> Result<SynthData> {
    if scenario.days < scenario.lag + 10 {
        return Err(Error::Invalid("scenario too short for the lag".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let start = NaiveDate::from_ymd_opt(1997, 1, 2).unwrap();
    let dates: Vec<NaiveDate> = (0..scenario.days)
        .map(|d| start + Duration::days(d as i64))
        .collect();
    let year = 365.25;
    let two_pi = 2.0 * std::f64::consts::PI;

    // Temperature: summer peak, mild noise.
    let temp_noise = Normal::new(0.0, 1.2).unwrap();
    let temp_mean: Vec<f64> = (0..scenario.days)
        .map(|d| 12.0 - 8.0 * (two_pi * d as f64 / year).cos() + temp_noise.sample(&mut rng))
        .collect();
    let temp_max: Vec<f64> = temp_mean.iter().map(|t| t + 4.0).collect();

    // Ambient: winter peak, per-site multiplicative offsets.
    let sites: Vec<SiteRecord> = (0..scenario.sites)
        .map(|j| SiteRecord {
            id: format!("s{j}"),
            district: format!("d{j}"),
        })
        .collect();
    let amb_noise = Normal::new(0.0, scenario.ambient_noise_sd).unwrap();
    let mut ambient = Vec::with_capacity(scenario.days);
    for d in 0..scenario.days {
        let base = scenario.ambient_mean
            + scenario.ambient_amplitude * (two_pi * d as f64 / year).cos()
            + amb_noise.sample(&mut rng);
        let row: Vec<Option<f64>> = (0..scenario.sites)
            .map(|j| {
                let site_factor = 1.0 + 0.03 * (j as f64 - (scenario.sites as f64 - 1.0) / 2.0);
                Some((base * site_factor).max(1.0))
            })
            .collect();
        ambient.push(row);
    }
    let monitor = MonitorPanel {
        sites,
        dates: dates.clone(),
        ambient,
    };
    let ambient_avg: Vec<f64> = spatial_average(&monitor)
        .into_iter()
        .map(|v| v.expect("all days observed"))
        .collect();

    // Daily true moments of the personal exposure distribution.
    let day_noise = Normal::new(0.0, scenario.day_noise_sd).unwrap();
    let cv = scenario.cv();
    let mut lambda1 = Vec::with_capacity(scenario.days);
    let mut lambda2 = Vec::with_capacity(scenario.days);
    for d in 0..scenario.days {
        let mean = (scenario.theta + scenario.phi * ambient_avg[d] + day_noise.sample(&mut rng))
            .max(0.5);
        lambda1.push(mean);
        lambda2.push((cv * mean) * (cv * mean));
    }

    // Exposure panel. Synthetic draws carry no source split: the whole
    // value is booked as ambient-origin.
    let k = scenario.sites * scenario.reps_per_site;
    let columns: Vec<PanelColumn> = (0..scenario.sites)
        .flat_map(|j| {
            (0..scenario.reps_per_site).map(move |r| PanelColumn {
                district: format!("d{j}"),
                replicate: r as u32,
            })
        })
        .collect();
    let mut exposure = Vec::with_capacity(scenario.days);
    for d in 0..scenario.days {
        let row: Vec<f64> = match scenario.law {
            ExposureLaw::LogNormal { .. } => {
                let params = lognormal_from_moments(lambda1[d], lambda2[d])?;
                let normal = Normal::new(params.m, params.s2.sqrt().max(1e-12)).unwrap();
                (0..k).map(|_| normal.sample(&mut rng).exp()).collect()
            }
            ExposureLaw::Normal { .. } => {
                let normal = Normal::new(lambda1[d], lambda2[d].sqrt().max(1e-12)).unwrap();
                (0..k).map(|_| normal.sample(&mut rng).max(0.0)).collect()
            }
            ExposureLaw::Fixed => vec![lambda1[d]; k],
        };
        exposure.push(row);
    }
    let panel = ExposurePanel {
        dates: dates.clone(),
        columns,
        ambient_part: exposure.clone(),
        indoor_part: vec![vec![0.0; k]; scenario.days],
        exposure,
        seed: scenario.seed,
    };

    // Counts from the exact mean function at the truth.
    let health_no_counts = HealthSeries {
        dates: dates.clone(),
        counts: vec![0; scenario.days],
        temp_mean,
        temp_max: Some(temp_max),
        rain: None,
        wind: None,
        sun: None,
    };
    let (design, time_basis, temp_basis) =
        build_design(&health_no_counts, scenario.time_df, scenario.temp_df)?;
    let alpha = scenario
        .alpha
        .clone()
        .unwrap_or_else(|| scenario.default_alpha());
    if alpha.len() != 1 + scenario.time_df + scenario.temp_df {
        return Err(Error::Invalid(format!(
            "alpha has {} entries, design needs {}",
            alpha.len(),
            1 + scenario.time_df + scenario.temp_df
        )));
    }
    let strategy = scenario.strategy();
    let mut counts = Vec::with_capacity(scenario.days);
    for t in 0..scenario.days {
        let za: f64 = design[t].iter().zip(&alpha).map(|(z, a)| z * a).sum();
        let eta = if t >= scenario.lag {
            let d = t - scenario.lag;
            let moments = DailyMoments {
                lambda1: lambda1[d],
                lambda2: lambda2[d],
                lambda3: scenario.lambda3.lambda3(lambda1[d], lambda2[d])?,
                k,
            };
            za + strategy.exposure_term(scenario.gamma, &moments)
        } else {
            za
        };
        let mu = eta.exp();
        if !mu.is_finite() {
            return Err(Error::Invalid(format!("non-finite mean on day {t}")));
        }
        counts.push(Poisson::new(mu).unwrap().sample(&mut rng) as u64);
    }
    let health = HealthSeries {
        counts,
        ..health_no_counts
    };

    Ok(SynthData {
        monitor,
        panel,
        health,
        truth: SynthTruth {
            gamma: scenario.gamma,
            alpha,
            lambda1,
            lambda2,
            theta: scenario.theta,
            phi: scenario.phi,
            rr10: (10.0 * scenario.gamma).exp(),
            seed: scenario.seed,
        },
        design,
        time_basis,
        temp_basis,
    })
}
