//! MCMC fitting of the exposure-response models.
//!
//! The sampler mixes exact Gibbs draws where the model is conjugate (the
//! level variances σ² and τ²) with block random-walk Metropolis-Hastings
//! moves everywhere else: one adaptive block for the regression
//! coefficients β = (γ, α) and a two-parameter block per day for
//! (λ1, λ2). Proposal scales and the β proposal covariance adapt during
//! burn-in only and are frozen afterwards, so the main run is a valid
//! fixed-kernel chain. Day-level variance proposals below zero are
//! rejected, enforcing the truncation of the λ2 prior.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data_io::RunConfig;
use crate::error::{Error, Result};
use crate::exposure_moments::{lognormal_from_moments, DailyMoments, DayStats, Lambda3Rule};
use crate::mean_models::MeanStrategy;
use crate::micro_sim::splitmix64;

const LN_2PI: f64 = 1.8378770664093453;

/// Prior hyperparameters. The day-level prior means default to empirical
/// anchors (grand means of the daily sample moments) resolved when the
/// spec is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Mean of the Gaussian prior on every β coordinate.
    pub beta_mean: f64,
    /// Variance of the (diagonal, vague) Gaussian prior on β.
    pub beta_var: f64,
    /// Prior mean ξ of the daily exposure-mean level.
    pub xi: f64,
    /// Prior mean s² of the daily exposure-variance level.
    pub s2_mean: f64,
    /// Inverse-gamma shape/rate ε for σ² and τ².
    pub epsilon: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            beta_mean: 0.0,
            beta_var: 1.0e4,
            xi: 0.0,
            s2_mean: 0.0,
            epsilon: 0.001,
        }
    }
}

/// Exposure data as the likelihood sees it.
#[derive(Debug, Clone)]
pub enum ExposureInput {
    /// One fixed value per exposure day (models i and ii).
    Fixed(Vec<f64>),
    /// Per-day sample sufficient statistics (models iii and iv).
    Sampled {
        stats: Vec<DayStats>,
        family: ExposureFamily,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExposureFamily {
    Normal,
    LogNormal,
}

impl ExposureInput {
    pub fn n_days(&self) -> usize {
        match self {
            ExposureInput::Fixed(v) => v.len(),
            ExposureInput::Sampled { stats, .. } => stats.len(),
        }
    }
}

/// A fully aligned model ready to fit: counts and covariate rows for the
/// likelihood window, the exposure-day data, and the window → exposure-day
/// map produced by the lag alignment.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub strategy: MeanStrategy,
    pub lambda3: Lambda3Rule,
    /// Counts on window days.
    pub counts: Vec<u64>,
    /// Covariate rows (intercept first) on window days.
    pub design: Vec<Vec<f64>>,
    /// Exposure-day index feeding each window day.
    pub exposure_for_count: Vec<usize>,
    pub exposure: ExposureInput,
    pub priors: Priors,
    pub lag: usize,
    /// Calendar bookkeeping for reports.
    pub window_dates: Vec<NaiveDate>,
    pub exposure_dates: Vec<NaiveDate>,
}

impl ModelSpec {
    pub fn n_window(&self) -> usize {
        self.counts.len()
    }

    pub fn n_coefs(&self) -> usize {
        1 + self.design.first().map_or(0, |r| r.len())
    }

    pub fn uses_hierarchy(&self) -> bool {
        matches!(self.exposure, ExposureInput::Sampled { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.counts.len();
        if w == 0 {
            return Err(Error::Invalid("empty likelihood window".into()));
        }
        if self.design.len() != w || self.exposure_for_count.len() != w {
            return Err(Error::Invalid("window arrays disagree in length".into()));
        }
        let d = self.exposure.n_days();
        if d == 0 {
            return Err(Error::Invalid("no exposure days".into()));
        }
        if self.exposure_for_count.iter().any(|&i| i >= d) {
            return Err(Error::Invalid("exposure index out of range".into()));
        }
        match (&self.strategy, &self.exposure) {
            (MeanStrategy::Fixed, ExposureInput::Fixed(_)) => {}
            (MeanStrategy::NormalExact, ExposureInput::Sampled { family, .. })
                if *family == ExposureFamily::Normal => {}
            (MeanStrategy::LognormalTaylor, ExposureInput::Sampled { family, .. })
            | (MeanStrategy::GeneralG { .. }, ExposureInput::Sampled { family, .. })
                if *family == ExposureFamily::LogNormal => {}
            _ => {
                return Err(Error::Invalid(
                    "mean strategy does not match the exposure input family".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Sampler protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub chains: usize,
    pub burn_in: usize,
    /// Post-burn-in iterations per chain.
    pub iterations: usize,
    pub thin: usize,
    /// Retain per-day λ draws (needed by predictive residual checks).
    pub keep_lambda: bool,
    /// Treat γ as known at this value (point-mass prior).
    pub fix_gamma: Option<f64>,
    /// β block updates per sweep.
    pub beta_updates: usize,
}

impl SamplerSettings {
    /// The full study protocol: 2 chains, 20,000 burn-in, 250,000
    /// iterations thinned by 25.
    pub fn protocol() -> SamplerSettings {
        SamplerSettings {
            chains: 2,
            burn_in: 20_000,
            iterations: 250_000,
            thin: 25,
            keep_lambda: true,
            fix_gamma: None,
            beta_updates: 5,
        }
    }

    /// A small desk-scale protocol for tests and examples.
    pub fn desk(burn_in: usize, iterations: usize, thin: usize) -> SamplerSettings {
        SamplerSettings {
            chains: 2,
            burn_in,
            iterations,
            thin,
            keep_lambda: true,
            fix_gamma: None,
            beta_updates: 5,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> SamplerSettings {
        SamplerSettings {
            chains: cfg.chains,
            burn_in: cfg.burn_in,
            iterations: cfg.iterations,
            thin: cfg.thin,
            keep_lambda: cfg.keep_lambda,
            fix_gamma: None,
            beta_updates: cfg.beta_updates,
        }
    }

    pub fn retained_per_chain(&self) -> usize {
        self.iterations / self.thin
    }
}

/// Acceptance bookkeeping per proposal block family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptStat {
    pub block: String,
    pub accepted: u64,
    pub proposed: u64,
}

impl AcceptStat {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Thinned draws from one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// `params[draw][param]` in [`PosteriorDraws::param_names`] order.
    pub params: Vec<Vec<f64>>,
    pub deviance: Vec<f64>,
    /// `lambda[draw][day] = (λ1, λ2)` when retained.
    pub lambda: Option<Vec<Vec<(f64, f64)>>>,
}

/// Posterior draws across chains plus protocol metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub param_names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    /// Posterior mean of (λ1, λ2) per exposure day over retained draws.
    pub lambda_mean: Option<Vec<(f64, f64)>>,
    pub accept: Vec<AcceptStat>,
    pub seed: u64,
    pub settings: SamplerSettings,
    pub n_exposure_days: usize,
}

impl PosteriorDraws {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// All chains' draws of one named parameter, pooled.
    pub fn pooled(&self, name: &str) -> Vec<f64> {
        let Some(idx) = self.param_index(name) else {
            return Vec::new();
        };
        self.chains
            .iter()
            .flat_map(|c| c.params.iter().map(move |d| d[idx]))
            .collect()
    }

    pub fn gamma_draws(&self) -> Vec<f64> {
        self.pooled("gamma")
    }

    /// Per-chain series of one named parameter.
    pub fn by_chain(&self, name: &str) -> Vec<Vec<f64>> {
        let Some(idx) = self.param_index(name) else {
            return Vec::new();
        };
        self.chains
            .iter()
            .map(|c| c.params.iter().map(|d| d[idx]).collect())
            .collect()
    }

    pub fn pooled_mean(&self, name: &str) -> f64 {
        let v = self.pooled(name);
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Generic adaptive random-walk machinery
// ---------------------------------------------------------------------------

/// Adaptive random-walk proposal for one parameter block. The global scale
/// follows a Robbins-Monro recursion toward the target acceptance rate and
/// the proposal covariance is refreshed from the burn-in history; both stop
/// changing once [`AdaptiveBlock::freeze`] is called.
#[derive(Debug, Clone)]
pub struct AdaptiveBlock {
    base_scales: Vec<f64>,
    scale: f64,
    target: f64,
    chol: Option<Vec<Vec<f64>>>,
    history: Vec<Vec<f64>>,
    batch_accepted: u32,
    batch_size: u32,
    batch_index: u32,
    frozen: bool,
}

impl AdaptiveBlock {
    pub fn new(base_scales: Vec<f64>, target: f64) -> AdaptiveBlock {
        AdaptiveBlock {
            base_scales,
            scale: 1.0,
            target,
            chol: None,
            history: Vec::new(),
            batch_accepted: 0,
            batch_size: 0,
            batch_index: 0,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.base_scales.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn propose(&self, current: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.dim();
        match &self.chol {
            None => current
                .iter()
                .zip(&self.base_scales)
                .map(|(x, s)| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    x + self.scale * s * z
                })
                .collect(),
            Some(chol) => {
                let z: Vec<f64> = (0..d)
                    .map(|_| rng.sample(rand_distr::StandardNormal))
                    .collect();
                let factor = self.scale * 2.38 / (d as f64).sqrt();
                (0..d)
                    .map(|i| {
                        let step: f64 = (0..=i).map(|j| chol[i][j] * z[j]).sum();
                        current[i] + factor * step
                    })
                    .collect()
            }
        }
    }

    /// Record an accept/reject outcome and the current state; adapts scale
    /// per batch and covariance periodically until frozen.
    pub fn record(&mut self, state: &[f64], accepted: bool) {
        if self.frozen {
            return;
        }
        self.history.push(state.to_vec());
        self.batch_size += 1;
        if accepted {
            self.batch_accepted += 1;
        }
        if self.batch_size >= 50 {
            self.batch_index += 1;
            let rate = self.batch_accepted as f64 / self.batch_size as f64;
            let step = (1.0 / (self.batch_index as f64).sqrt()).min(0.5);
            self.scale = (self.scale.ln() + step * (rate - self.target)).exp();
            self.scale = self.scale.clamp(1e-4, 1e4);
            self.batch_accepted = 0;
            self.batch_size = 0;

            if self.dim() > 1 && self.batch_index % 4 == 0 && self.history.len() >= 200 {
                self.refresh_covariance();
            }
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.history = Vec::new();
    }

    fn refresh_covariance(&mut self) {
        let d = self.dim();
        let tail = &self.history[self.history.len().saturating_sub(2000)..];
        let n = tail.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| tail.iter().map(|s| s[j]).sum::<f64>() / n)
            .collect();
        let mut cov = vec![vec![0.0; d]; d];
        for s in tail {
            for i in 0..d {
                for j in 0..=i {
                    cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i][j] /= n - 1.0;
                cov[j][i] = cov[i][j];
            }
            // Jitter keeps the factorization well posed even before the
            // chain has explored every direction.
            cov[i][i] += 1e-12 + 1e-6 * self.base_scales[i] * self.base_scales[i];
        }
        if let Some(chol) = cholesky(&cov) {
            self.chol = Some(chol);
        }
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// One random-walk Metropolis step with a symmetric proposal: accept with
/// probability `min(1, exp(lp' − lp))`. Returns (accepted, log-ratio).
pub fn mh_step(
    logpost: impl Fn(&[f64]) -> f64,
    current: &mut Vec<f64>,
    current_lp: &mut f64,
    block: &AdaptiveBlock,
    rng: &mut ChaCha8Rng,
) -> (bool, f64) {
    let proposal = block.propose(current, rng);
    let lp_new = logpost(&proposal);
    let log_ratio = lp_new - *current_lp;
    let accept = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
    if accept {
        *current = proposal;
        *current_lp = lp_new;
    }
    (accept, log_ratio)
}

/// Exact conjugate draw for a level variance: with residuals `v − prior_mean`
/// the full conditional is Inverse-Gamma(ε + n/2, ε + ½Σ(v − prior_mean)²).
pub fn update_variance_gibbs(
    rng: &mut ChaCha8Rng,
    values: &[f64],
    prior_mean: f64,
    epsilon: f64,
) -> f64 {
    let n = values.len() as f64;
    let ss: f64 = values
        .iter()
        .map(|v| (v - prior_mean) * (v - prior_mean))
        .sum();
    let shape = epsilon + n / 2.0;
    let rate = epsilon + ss / 2.0;
    let gamma = Gamma::new(shape, 1.0 / rate).expect("valid gamma");
    1.0 / gamma.sample(rng)
}

// ---------------------------------------------------------------------------
// Model likelihood pieces
// ---------------------------------------------------------------------------

fn ln_factorial_table(counts: &[u64]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0) as usize;
    let mut table = vec![0.0; max + 1];
    for y in 1..=max {
        table[y] = table[y - 1] + (y as f64).ln();
    }
    counts.iter().map(|&y| table[y as usize]).collect()
}

fn strategy_needs_lambda3(strategy: &MeanStrategy) -> bool {
    matches!(
        strategy,
        MeanStrategy::LognormalTaylor | MeanStrategy::GeneralG { .. }
    )
}

fn day_moments(
    spec: &ModelSpec,
    day: usize,
    lambda: Option<&[(f64, f64)]>,
) -> Result<DailyMoments> {
    match (&spec.exposure, lambda) {
        (ExposureInput::Fixed(values), _) => Ok(DailyMoments {
            lambda1: values[day],
            lambda2: 0.0,
            lambda3: 0.0,
            k: 1,
        }),
        (ExposureInput::Sampled { stats, .. }, Some(lambda)) => {
            let (l1, l2) = lambda[day];
            let l3 = if strategy_needs_lambda3(&spec.strategy) {
                spec.lambda3.lambda3(l1, l2)?
            } else {
                0.0
            };
            Ok(DailyMoments {
                lambda1: l1,
                lambda2: l2,
                lambda3: l3,
                k: stats[day].k,
            })
        }
        (ExposureInput::Sampled { .. }, None) => Err(Error::LambdaDrawsMissing),
    }
}

/// Log Poisson means per window day for given coefficients and (for the
/// hierarchical models) day-level moments. This is the single code path
/// behind both the sampler's deviance and the post-hoc diagnostics.
pub fn log_means(
    spec: &ModelSpec,
    beta: &[f64],
    lambda: Option<&[(f64, f64)]>,
) -> Result<Vec<f64>> {
    let gamma = beta[0];
    let alpha = &beta[1..];
    let mut etas = Vec::with_capacity(spec.n_window());
    for w in 0..spec.n_window() {
        let za: f64 = spec.design[w].iter().zip(alpha).map(|(z, a)| z * a).sum();
        let m = day_moments(spec, spec.exposure_for_count[w], lambda)?;
        etas.push(za + spec.strategy.exposure_term(gamma, &m));
    }
    Ok(etas)
}

/// Poisson deviance `−2 Σ [y ln μ − μ − ln y!]` over the window.
pub fn deviance(spec: &ModelSpec, beta: &[f64], lambda: Option<&[(f64, f64)]>) -> Result<f64> {
    let etas = log_means(spec, beta, lambda)?;
    let lnfact = ln_factorial_table(&spec.counts);
    let mut ll = 0.0;
    for w in 0..spec.n_window() {
        ll += spec.counts[w] as f64 * etas[w] - etas[w].exp() - lnfact[w];
    }
    Ok(-2.0 * ll)
}

// ---------------------------------------------------------------------------
// The sampler
// ---------------------------------------------------------------------------

struct ChainState {
    beta: Vec<f64>,
    /// (λ1, λ2) per exposure day; empty for fixed-exposure models.
    lambda: Vec<(f64, f64)>,
    sigma2: f64,
    tau2: f64,
    /// Cached design·α per window day.
    za: Vec<f64>,
}

struct DayAdapter {
    scale: f64,
    accepted: u32,
    proposed: u32,
    batch_index: u32,
    frozen: bool,
}

impl DayAdapter {
    fn new() -> DayAdapter {
        DayAdapter {
            scale: 1.0,
            accepted: 0,
            proposed: 0,
            batch_index: 0,
            frozen: false,
        }
    }

    fn record(&mut self, accepted: bool) {
        if self.frozen {
            return;
        }
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
        if self.proposed >= 50 {
            self.batch_index += 1;
            let rate = self.accepted as f64 / self.proposed as f64;
            let step = (1.0 / (self.batch_index as f64).sqrt()).min(0.5);
            self.scale = (self.scale.ln() + step * (rate - 0.28))
                .exp()
                .clamp(1e-3, 1e3);
            self.accepted = 0;
            self.proposed = 0;
        }
    }
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - (x - mean) * (x - mean) / (2.0 * var)
}

struct Engine<'a> {
    spec: &'a ModelSpec,
    settings: SamplerSettings,
    lnfact: Vec<f64>,
    /// Window index attached to each exposure day, if its lagged count
    /// falls inside the window.
    attach: Vec<Option<usize>>,
    /// Sampling-sd anchors per day for the (λ1, λ2) proposals.
    day_anchor: Vec<(f64, f64)>,
}

impl<'a> Engine<'a> {
    fn new(spec: &'a ModelSpec, settings: SamplerSettings) -> Engine<'a> {
        let lnfact = ln_factorial_table(&spec.counts);
        let mut attach = vec![None; spec.exposure.n_days()];
        for (w, &d) in spec.exposure_for_count.iter().enumerate() {
            attach[d] = Some(w);
        }
        let day_anchor = match &spec.exposure {
            ExposureInput::Fixed(v) => vec![(0.0, 0.0); v.len()],
            ExposureInput::Sampled { stats, .. } => stats
                .iter()
                .map(|s| {
                    let k = s.k as f64;
                    let mean_sd = (s.var / k).sqrt().max(1e-6);
                    let var_sd = ((2.0 / (k - 1.0)).sqrt() * s.var).max(1e-6);
                    (mean_sd, var_sd)
                })
                .collect(),
        };
        Engine {
            spec,
            settings,
            lnfact,
            attach,
            day_anchor,
        }
    }

    fn exposure_family(&self) -> Option<ExposureFamily> {
        match &self.spec.exposure {
            ExposureInput::Fixed(_) => None,
            ExposureInput::Sampled { family, .. } => Some(*family),
        }
    }

    /// Exposure-sample log-likelihood for one day at (λ1, λ2).
    fn exposure_loglik(&self, day: usize, l1: f64, l2: f64) -> Result<f64> {
        match &self.spec.exposure {
            ExposureInput::Fixed(_) => Ok(0.0),
            ExposureInput::Sampled { stats, family } => match family {
                ExposureFamily::Normal => stats[day].normal_loglik(l1, l2),
                ExposureFamily::LogNormal => {
                    let params = lognormal_from_moments(l1, l2)?;
                    if params.s2 <= 0.0 {
                        return Err(Error::Invalid("degenerate log-normal scale".into()));
                    }
                    stats[day].lognormal_loglik(params)
                }
            },
        }
    }

    /// Poisson log-likelihood term for the window day fed by `day`,
    /// at the given day moments and cached zᵀα.
    fn poisson_term(&self, state: &ChainState, day: usize, l1: f64, l2: f64) -> Result<f64> {
        let Some(w) = self.attach[day] else {
            return Ok(0.0);
        };
        let gamma = state.beta[0];
        let l3 = if strategy_needs_lambda3(&self.spec.strategy) {
            self.spec.lambda3.lambda3(l1, l2)?
        } else {
            0.0
        };
        let m = DailyMoments {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            k: 1,
        };
        let eta = state.za[w] + self.spec.strategy.exposure_term(gamma, &m);
        Ok(self.spec.counts[w] as f64 * eta - eta.exp())
    }

    /// Poisson log-likelihood over the whole window for candidate β,
    /// leaving caches untouched.
    fn poisson_loglik_beta(&self, beta: &[f64], state: &ChainState) -> Result<f64> {
        let gamma = beta[0];
        let alpha = &beta[1..];
        let mut ll = 0.0;
        for w in 0..self.spec.n_window() {
            let za: f64 = self.spec.design[w]
                .iter()
                .zip(alpha)
                .map(|(z, a)| z * a)
                .sum();
            let d = self.spec.exposure_for_count[w];
            let m = match &self.spec.exposure {
                ExposureInput::Fixed(v) => DailyMoments {
                    lambda1: v[d],
                    lambda2: 0.0,
                    lambda3: 0.0,
                    k: 1,
                },
                ExposureInput::Sampled { .. } => {
                    let (l1, l2) = state.lambda[d];
                    let l3 = if strategy_needs_lambda3(&self.spec.strategy) {
                        self.spec.lambda3.lambda3(l1, l2)?
                    } else {
                        0.0
                    };
                    DailyMoments {
                        lambda1: l1,
                        lambda2: l2,
                        lambda3: l3,
                        k: 1,
                    }
                }
            };
            let eta = za + self.spec.strategy.exposure_term(gamma, &m);
            if !eta.is_finite() {
                return Ok(f64::NEG_INFINITY);
            }
            ll += self.spec.counts[w] as f64 * eta - eta.exp();
        }
        Ok(ll)
    }

    fn beta_logprior(&self, beta: &[f64]) -> f64 {
        let p = &self.spec.priors;
        beta.iter()
            .map(|b| normal_logpdf(*b, p.beta_mean, p.beta_var))
            .sum()
    }

    fn refresh_za(&self, state: &mut ChainState) {
        let alpha = &state.beta[1..];
        state.za = self
            .spec
            .design
            .iter()
            .map(|row| row.iter().zip(alpha).map(|(z, a)| z * a).sum())
            .collect();
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Result<ChainState> {
        let p = self.spec.n_coefs();
        let counts_mean =
            self.spec.counts.iter().sum::<u64>() as f64 / self.spec.n_window() as f64;
        for _attempt in 0..50 {
            let mut beta = vec![0.0; p];
            beta[0] = match self.settings.fix_gamma {
                Some(g) => g,
                None => rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.004,
            };
            beta[1] = counts_mean.max(0.5).ln()
                + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3;
            for b in beta.iter_mut().skip(2) {
                *b = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.15;
            }
            let lambda: Vec<(f64, f64)> = match &self.spec.exposure {
                ExposureInput::Fixed(_) => Vec::new(),
                ExposureInput::Sampled { stats, .. } => stats
                    .iter()
                    .map(|s| {
                        let jitter_mean =
                            1.0 + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05;
                        let jitter_var =
                            (rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3).exp();
                        (
                            (s.mean * jitter_mean).max(1e-3),
                            (s.var * jitter_var).max(1e-8),
                        )
                    })
                    .collect(),
            };
            let (sigma2, tau2) = if lambda.is_empty() {
                (1.0, 1.0)
            } else {
                let means: Vec<f64> = lambda.iter().map(|l| l.0).collect();
                let vars: Vec<f64> = lambda.iter().map(|l| l.1).collect();
                let spread = |v: &[f64]| {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                        / (v.len() as f64 - 1.0))
                        .max(1e-6)
                };
                let u: f64 = rng.gen_range(0.5..2.0);
                let w: f64 = rng.gen_range(0.5..2.0);
                (spread(&means) * u, spread(&vars) * w)
            };
            let mut state = ChainState {
                beta,
                lambda,
                sigma2,
                tau2,
                za: Vec::new(),
            };
            self.refresh_za(&mut state);
            if self.full_logpost(&state).map_or(false, f64::is_finite) {
                return Ok(state);
            }
        }
        Err(Error::BadInitialization(50))
    }

    fn full_logpost(&self, state: &ChainState) -> Result<f64> {
        let mut lp = self.poisson_loglik_beta(&state.beta, state)?;
        lp += self.beta_logprior(&state.beta);
        if !state.lambda.is_empty() {
            let p = &self.spec.priors;
            for (d, &(l1, l2)) in state.lambda.iter().enumerate() {
                lp += self.exposure_loglik(d, l1, l2)?;
                lp += normal_logpdf(l1, p.xi, state.sigma2);
                lp += normal_logpdf(l2, p.s2_mean, state.tau2);
            }
            // Inverse-gamma log priors for the level variances.
            let ig = |v: f64| -(p.epsilon + 1.0) * v.ln() - p.epsilon / v;
            lp += ig(state.sigma2) + ig(state.tau2);
        }
        Ok(lp)
    }

    fn run_chain(
        &self,
        chain_seed: u64,
        accept: &mut Vec<AcceptStat>,
        lambda_sum: &mut [(f64, f64)],
        lambda_draws_count: &mut usize,
    ) -> Result<ChainDraws> {
        let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
        let mut state = self.initial_state(&mut rng)?;
        let p = self.spec.n_coefs();
        let hier = self.spec.uses_hierarchy();
        let family = self.exposure_family();

        // β block: active coordinates exclude a fixed γ.
        let active: Vec<usize> = if self.settings.fix_gamma.is_some() {
            (1..p).collect()
        } else {
            (0..p).collect()
        };
        let base: Vec<f64> = active
            .iter()
            .map(|&i| if i == 0 { 0.002 } else { 0.05 })
            .collect();
        let mut beta_block = AdaptiveBlock::new(base, 0.234);
        let mut day_adapters: Vec<DayAdapter> =
            (0..state.lambda.len()).map(|_| DayAdapter::new()).collect();

        let mut beta_acc = AcceptStat {
            block: "beta".into(),
            accepted: 0,
            proposed: 0,
        };
        let mut day_acc = AcceptStat {
            block: "lambda_day".into(),
            accepted: 0,
            proposed: 0,
        };

        let retained = self.settings.retained_per_chain();
        let mut params = Vec::with_capacity(retained);
        let mut deviances = Vec::with_capacity(retained);
        let mut lambdas: Option<Vec<Vec<(f64, f64)>>> = if hier && self.settings.keep_lambda {
            Some(Vec::with_capacity(retained))
        } else {
            None
        };

        let total = self.settings.burn_in + self.settings.iterations;
        let mut beta_lp =
            self.poisson_loglik_beta(&state.beta, &state)? + self.beta_logprior(&state.beta);

        for sweep in 0..total {
            let in_burn = sweep < self.settings.burn_in;

            // β block updates.
            for _ in 0..self.settings.beta_updates.max(1) {
                let sub: Vec<f64> = active.iter().map(|&i| state.beta[i]).collect();
                let proposal_sub = beta_block.propose(&sub, &mut rng);
                let mut candidate = state.beta.clone();
                for (value, &i) in proposal_sub.iter().zip(&active) {
                    candidate[i] = *value;
                }
                let cand_lp = self.poisson_loglik_beta(&candidate, &state)?
                    + self.beta_logprior(&candidate);
                let log_ratio = cand_lp - beta_lp;
                let accepted = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
                if accepted {
                    state.beta = candidate;
                    beta_lp = cand_lp;
                    self.refresh_za(&mut state);
                }
                if in_burn {
                    let recorded: Vec<f64> = active.iter().map(|&i| state.beta[i]).collect();
                    beta_block.record(&recorded, accepted);
                } else {
                    beta_acc.proposed += 1;
                    if accepted {
                        beta_acc.accepted += 1;
                    }
                }
            }

            if hier {
                // Per-day (λ1, λ2) blocks.
                let priors = self.spec.priors;
                for d in 0..state.lambda.len() {
                    let (l1, l2) = state.lambda[d];
                    let (s1, s2) = self.day_anchor[d];
                    let c = day_adapters[d].scale;
                    let z1: f64 = rng.sample(rand_distr::StandardNormal);
                    let z2: f64 = rng.sample(rand_distr::StandardNormal);
                    let c1 = l1 + c * s1 * z1;
                    let c2 = l2 + c * s2 * z2;

                    // Truncation: reject nonpositive λ2 outright; the
                    // log-normal parameterization also needs λ1 > 0.
                    let feasible =
                        c2 > 0.0 && (family != Some(ExposureFamily::LogNormal) || c1 > 0.0);
                    let mut accepted = false;
                    if feasible {
                        let old = self.exposure_loglik(d, l1, l2)?
                            + normal_logpdf(l1, priors.xi, state.sigma2)
                            + normal_logpdf(l2, priors.s2_mean, state.tau2)
                            + self.poisson_term(&state, d, l1, l2)?;
                        let new = self.exposure_loglik(d, c1, c2)?
                            + normal_logpdf(c1, priors.xi, state.sigma2)
                            + normal_logpdf(c2, priors.s2_mean, state.tau2)
                            + self.poisson_term(&state, d, c1, c2)?;
                        let log_ratio = new - old;
                        accepted = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
                        if accepted {
                            state.lambda[d] = (c1, c2);
                        }
                    }
                    if in_burn {
                        day_adapters[d].record(accepted);
                    } else {
                        day_acc.proposed += 1;
                        if accepted {
                            day_acc.accepted += 1;
                        }
                    }
                }

                // Conjugate level-variance draws.
                let means: Vec<f64> = state.lambda.iter().map(|l| l.0).collect();
                let vars: Vec<f64> = state.lambda.iter().map(|l| l.1).collect();
                state.sigma2 =
                    update_variance_gibbs(&mut rng, &means, priors.xi, priors.epsilon);
                state.tau2 =
                    update_variance_gibbs(&mut rng, &vars, priors.s2_mean, priors.epsilon);
                // λ priors moved under β's cached posterior only through
                // the Poisson part, which poisson_loglik_beta recomputes,
                // so beta_lp needs a refresh after λ and variance moves.
                beta_lp = self.poisson_loglik_beta(&state.beta, &state)?
                    + self.beta_logprior(&state.beta);
            }

            if sweep + 1 == self.settings.burn_in {
                beta_block.freeze();
                for a in &mut day_adapters {
                    a.frozen = true;
                }
            }

            if !in_burn
                && (sweep - self.settings.burn_in) % self.settings.thin == self.settings.thin - 1
            {
                let mut row = state.beta.clone();
                if hier {
                    row.push(state.sigma2);
                    row.push(state.tau2);
                }
                params.push(row);
                let lam = if hier {
                    Some(state.lambda.as_slice())
                } else {
                    None
                };
                let etas = log_means(self.spec, &state.beta, lam)?;
                let mut ll = 0.0;
                for w in 0..self.spec.n_window() {
                    ll += self.spec.counts[w] as f64 * etas[w] - etas[w].exp() - self.lnfact[w];
                }
                deviances.push(-2.0 * ll);
                if hier {
                    for (d, &(l1, l2)) in state.lambda.iter().enumerate() {
                        lambda_sum[d].0 += l1;
                        lambda_sum[d].1 += l2;
                    }
                    *lambda_draws_count += 1;
                }
                if let Some(store) = &mut lambdas {
                    store.push(state.lambda.clone());
                }
            }
        }

        accept.push(beta_acc);
        if hier {
            accept.push(day_acc);
        }
        Ok(ChainDraws {
            params,
            deviance: deviances,
            lambda: lambdas,
        })
    }
}

/// Fit a model spec by MCMC following the configured protocol.
pub fn run_chains(
    spec: &ModelSpec,
    settings: SamplerSettings,
    seed: u64,
) -> Result<PosteriorDraws> {
    spec.validate()?;
    if settings.chains < 2 {
        return Err(Error::SingleChain(settings.chains));
    }
    if settings.thin == 0 {
        return Err(Error::Config("thinning must be ≥ 1".into()));
    }
    let engine = Engine::new(spec, settings);
    let hier = spec.uses_hierarchy();
    let n_days = spec.exposure.n_days();

    let mut param_names = vec!["gamma".to_string()];
    for j in 1..spec.n_coefs() {
        param_names.push(format!("alpha_{j}"));
    }
    if hier {
        param_names.push("sigma2".into());
        param_names.push("tau2".into());
    }

    let mut chains = Vec::with_capacity(settings.chains);
    let mut accept = Vec::new();
    let mut lambda_sum = vec![(0.0, 0.0); n_days];
    let mut lambda_count = 0usize;
    for chain in 0..settings.chains {
        let chain_seed = splitmix64(seed ^ splitmix64(0xC0FFEE ^ chain as u64));
        chains.push(engine.run_chain(
            chain_seed,
            &mut accept,
            &mut lambda_sum,
            &mut lambda_count,
        )?);
    }

    let lambda_mean = if hier && lambda_count > 0 {
        Some(
            lambda_sum
                .iter()
                .map(|&(a, b)| (a / lambda_count as f64, b / lambda_count as f64))
                .collect(),
        )
    } else {
        None
    };

    Ok(PosteriorDraws {
        param_names,
        chains,
        lambda_mean,
        accept,
        seed,
        settings,
        n_exposure_days: n_days,
    })
}

// ---------------------------------------------------------------------------
// Comparison variant: latent daily mean with uniform-prior variance
// ---------------------------------------------------------------------------

/// Inputs for the comparison model that centers a latent daily exposure on
/// the observed daily mean with a common variance:
/// `ln μ_t = λ_{t−l}γ + zᵀα`, `λ_t ~ N(x̄_t, σ²)`, `σ² ~ Uniform(0, 25)`.
#[derive(Debug, Clone)]
pub struct LatentMeanSpec {
    pub counts: Vec<u64>,
    pub design: Vec<Vec<f64>>,
    pub exposure_for_count: Vec<usize>,
    /// Observed daily exposure means x̄ per exposure day.
    pub day_means: Vec<f64>,
    pub beta_mean: f64,
    pub beta_var: f64,
    pub lag: usize,
}

pub const LATENT_VARIANCE_UPPER: f64 = 25.0;

/// Fit the latent-mean comparison variant. Its σ² is drawn by inverse-CDF
/// on a fine grid over (0, 25), an (effectively exact) Gibbs draw from the
/// truncated conditional.
pub fn fit_latent_mean_variant(
    spec: &LatentMeanSpec,
    settings: SamplerSettings,
    seed: u64,
) -> Result<PosteriorDraws> {
    if settings.chains < 2 {
        return Err(Error::SingleChain(settings.chains));
    }
    let w = spec.counts.len();
    if w == 0 || spec.design.len() != w || spec.exposure_for_count.len() != w {
        return Err(Error::Invalid("latent-mean spec arrays disagree".into()));
    }
    let n_days = spec.day_means.len();
    let p = 1 + spec.design[0].len();
    let lnfact = ln_factorial_table(&spec.counts);
    let mut attach = vec![None; n_days];
    for (wi, &d) in spec.exposure_for_count.iter().enumerate() {
        attach[d] = Some(wi);
    }

    let mut param_names = vec!["gamma".to_string()];
    for j in 1..p {
        param_names.push(format!("alpha_{j}"));
    }
    param_names.push("sigma2".into());

    let poisson_ll = |beta: &[f64], lambda: &[f64]| -> f64 {
        let gamma = beta[0];
        let alpha = &beta[1..];
        let mut ll = 0.0;
        for wi in 0..w {
            let za: f64 = spec.design[wi].iter().zip(alpha).map(|(z, a)| z * a).sum();
            let eta = za + gamma * lambda[spec.exposure_for_count[wi]];
            if !eta.is_finite() {
                return f64::NEG_INFINITY;
            }
            ll += spec.counts[wi] as f64 * eta - eta.exp();
        }
        ll
    };
    let beta_prior = |beta: &[f64]| -> f64 {
        beta.iter()
            .map(|b| normal_logpdf(*b, spec.beta_mean, spec.beta_var))
            .sum()
    };

    let counts_mean = spec.counts.iter().sum::<u64>() as f64 / w as f64;
    let retained = settings.retained_per_chain();
    let mut chains = Vec::with_capacity(settings.chains);
    let mut accept = Vec::new();

    for chain in 0..settings.chains {
        let chain_seed = splitmix64(seed ^ splitmix64(0xBEEF ^ chain as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);

        // Overdispersed starts: chains begin near opposite ends of the
        // uniform prior's support.
        let q = if settings.chains == 1 {
            0.5
        } else {
            0.02 + 0.96 * chain as f64 / (settings.chains as f64 - 1.0)
        };
        let mut sigma2 = LATENT_VARIANCE_UPPER * q;
        let mut beta = vec![0.0; p];
        beta[0] = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.004;
        beta[1] = counts_mean.max(0.5).ln()
            + rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3;
        for b in beta.iter_mut().skip(2) {
            *b = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.15;
        }
        let mut lambda: Vec<f64> = spec
            .day_means
            .iter()
            .map(|&m| {
                m + rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma2.sqrt() * 0.3
            })
            .collect();

        let mut beta_block = AdaptiveBlock::new(
            (0..p).map(|i| if i == 0 { 0.002 } else { 0.05 }).collect(),
            0.234,
        );
        let mut day_adapters: Vec<DayAdapter> = (0..n_days).map(|_| DayAdapter::new()).collect();
        let mut beta_acc = AcceptStat {
            block: "beta".into(),
            accepted: 0,
            proposed: 0,
        };
        let mut day_acc = AcceptStat {
            block: "lambda_day".into(),
            accepted: 0,
            proposed: 0,
        };

        let mut params = Vec::with_capacity(retained);
        let mut deviances = Vec::with_capacity(retained);
        let mut beta_lp = poisson_ll(&beta, &lambda) + beta_prior(&beta);
        let total = settings.burn_in + settings.iterations;

        for sweep in 0..total {
            let in_burn = sweep < settings.burn_in;

            for _ in 0..settings.beta_updates.max(1) {
                let proposal = beta_block.propose(&beta, &mut rng);
                let cand_lp = poisson_ll(&proposal, &lambda) + beta_prior(&proposal);
                let log_ratio = cand_lp - beta_lp;
                let accepted = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
                if accepted {
                    beta = proposal;
                    beta_lp = cand_lp;
                }
                if in_burn {
                    beta_block.record(&beta, accepted);
                } else {
                    beta_acc.proposed += 1;
                    if accepted {
                        beta_acc.accepted += 1;
                    }
                }
            }

            let gamma = beta[0];
            for d in 0..n_days {
                let scale = day_adapters[d].scale * (sigma2.sqrt() * 0.5).max(1e-3);
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let cand = lambda[d] + scale * z;
                let (old_p, new_p) = match attach[d] {
                    None => (0.0, 0.0),
                    Some(wi) => {
                        let za: f64 = spec.design[wi]
                            .iter()
                            .zip(&beta[1..])
                            .map(|(z, a)| z * a)
                            .sum();
                        let eta_old = za + gamma * lambda[d];
                        let eta_new = za + gamma * cand;
                        (
                            spec.counts[wi] as f64 * eta_old - eta_old.exp(),
                            spec.counts[wi] as f64 * eta_new - eta_new.exp(),
                        )
                    }
                };
                let old = old_p + normal_logpdf(lambda[d], spec.day_means[d], sigma2);
                let new = new_p + normal_logpdf(cand, spec.day_means[d], sigma2);
                let log_ratio = new - old;
                let accepted = log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp();
                if accepted {
                    lambda[d] = cand;
                }
                if in_burn {
                    day_adapters[d].record(accepted);
                } else {
                    day_acc.proposed += 1;
                    if accepted {
                        day_acc.accepted += 1;
                    }
                }
            }
            // λ moved under β's cached likelihood.
            beta_lp = poisson_ll(&beta, &lambda) + beta_prior(&beta);

            // σ² | λ on its truncated support.
            let ss: f64 = lambda
                .iter()
                .zip(&spec.day_means)
                .map(|(l, m)| (l - m) * (l - m))
                .sum();
            sigma2 = sample_truncated_variance(&mut rng, n_days, ss);

            if sweep + 1 == settings.burn_in {
                beta_block.freeze();
                for a in &mut day_adapters {
                    a.frozen = true;
                }
            }

            if !in_burn && (sweep - settings.burn_in) % settings.thin == settings.thin - 1 {
                let mut row = beta.clone();
                row.push(sigma2);
                params.push(row);
                let mut ll = 0.0;
                for wi in 0..w {
                    let za: f64 = spec.design[wi]
                        .iter()
                        .zip(&beta[1..])
                        .map(|(z, a)| z * a)
                        .sum();
                    let eta = za + beta[0] * lambda[spec.exposure_for_count[wi]];
                    ll += spec.counts[wi] as f64 * eta - eta.exp() - lnfact[wi];
                }
                deviances.push(-2.0 * ll);
            }
        }

        accept.push(beta_acc);
        accept.push(day_acc);
        chains.push(ChainDraws {
            params,
            deviance: deviances,
            lambda: None,
        });
    }

    Ok(PosteriorDraws {
        param_names,
        chains,
        lambda_mean: None,
        accept,
        seed,
        settings,
        n_exposure_days: n_days,
    })
}

/// Draw σ² from `p(σ²) ∝ (σ²)^{−n/2} exp(−ss/(2σ²))` truncated to
/// (0, 25): inverse-CDF on a log-density grid.
fn sample_truncated_variance(rng: &mut ChaCha8Rng, n: usize, ss: f64) -> f64 {
    const GRID: usize = 2048;
    let step = LATENT_VARIANCE_UPPER / GRID as f64;
    let mut logp = [0.0f64; GRID];
    let half_n = n as f64 / 2.0;
    let mut max_lp = f64::NEG_INFINITY;
    for (i, lp) in logp.iter_mut().enumerate() {
        let v = (i as f64 + 0.5) * step;
        *lp = -half_n * v.ln() - ss / (2.0 * v);
        max_lp = max_lp.max(*lp);
    }
    let mut total = 0.0;
    let mut weights = [0.0f64; GRID];
    for i in 0..GRID {
        weights[i] = (logp[i] - max_lp).exp();
        total += weights[i];
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, weight) in weights.iter().enumerate() {
        acc += weight;
        if u < acc {
            return (i as f64 + 0.5) * step;
        }
    }
    LATENT_VARIANCE_UPPER - step / 2.0
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Metadata sidecar for a persisted fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub param_names: Vec<String>,
    pub seed: u64,
    pub settings: SamplerSettings,
    pub n_exposure_days: usize,
    pub lambda_mean: Option<Vec<(f64, f64)>>,
    pub accept: Vec<AcceptStat>,
}

/// Persist draws as one CSV per chain
/// (`iter,gamma,alpha_1..alpha_p[,sigma2,tau2],deviance`), an optional λ
/// table per chain, and a JSON metadata sidecar.
pub fn write_draws(draws: &PosteriorDraws, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (c, chain) in draws.chains.iter().enumerate() {
        let mut out = BufWriter::new(File::create(dir.join(format!("draws_chain{c}.csv")))?);
        writeln!(out, "iter,{},deviance", draws.param_names.join(","))?;
        for (i, row) in chain.params.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{i},{},{}", cells.join(","), chain.deviance[i])?;
        }
        if let Some(lambda) = &chain.lambda {
            let mut lout =
                BufWriter::new(File::create(dir.join(format!("lambda_chain{c}.csv")))?);
            let mut header = vec!["iter".to_string()];
            for d in 0..draws.n_exposure_days {
                header.push(format!("lambda1_{d}"));
                header.push(format!("lambda2_{d}"));
            }
            writeln!(lout, "{}", header.join(","))?;
            for (i, row) in lambda.iter().enumerate() {
                let mut cells = vec![i.to_string()];
                for &(l1, l2) in row {
                    cells.push(l1.to_string());
                    cells.push(l2.to_string());
                }
                writeln!(lout, "{}", cells.join(","))?;
            }
        }
    }
    let meta = FitMeta {
        param_names: draws.param_names.clone(),
        seed: draws.seed,
        settings: draws.settings,
        n_exposure_days: draws.n_exposure_days,
        lambda_mean: draws.lambda_mean.clone(),
        accept: draws.accept.clone(),
    };
    let mut out = BufWriter::new(File::create(dir.join("fit_meta.json"))?);
    serde_json::to_writer_pretty(&mut out, &meta).map_err(|e| Error::Config(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reload a fit persisted by [`write_draws`].
pub fn load_draws(dir: impl AsRef<Path>) -> Result<PosteriorDraws> {
    let dir = dir.as_ref();
    let meta: FitMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fit_meta.json"))?)
            .map_err(|e| Error::Config(e.to_string()))?;
    let mut chains = Vec::new();
    for c in 0.. {
        let path = dir.join(format!("draws_chain{c}.csv"));
        if !path.exists() {
            break;
        }
        let mut reader = csv::Reader::from_path(&path)?;
        let mut params = Vec::new();
        let mut deviance = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row: Vec<f64> = (1..record.len() - 1)
                .map(|j| record[j].parse().unwrap_or(f64::NAN))
                .collect();
            params.push(row);
            deviance.push(record[record.len() - 1].parse().unwrap_or(f64::NAN));
        }
        let lpath = dir.join(format!("lambda_chain{c}.csv"));
        let lambda = if lpath.exists() {
            let mut lreader = csv::Reader::from_path(&lpath)?;
            let mut rows = Vec::new();
            for record in lreader.records() {
                let record = record?;
                let mut day_rows = Vec::with_capacity(meta.n_exposure_days);
                for d in 0..meta.n_exposure_days {
                    let l1: f64 = record[1 + 2 * d].parse().unwrap_or(f64::NAN);
                    let l2: f64 = record[2 + 2 * d].parse().unwrap_or(f64::NAN);
                    day_rows.push((l1, l2));
                }
                rows.push(day_rows);
            }
            Some(rows)
        } else {
            None
        };
        chains.push(ChainDraws {
            params,
            deviance,
            lambda,
        });
    }
    if chains.is_empty() {
        return Err(Error::NoDataRows {
            path: dir.display().to_string(),
        });
    }
    Ok(PosteriorDraws {
        param_names: meta.param_names,
        chains,
        lambda_mean: meta.lambda_mean,
        accept: meta.accept,
        seed: meta.seed,
        settings: meta.settings,
        n_exposure_days: meta.n_exposure_days,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::align_lagged;
    use crate::synth_oracle::{build_design, generate, ExposureLaw, SynthScenario};
    use approx::assert_abs_diff_eq;

    /// Model (iii)/(iv)-style spec over a generated world.
    pub(crate) fn spec_from_synth(
        data: &crate::synth_oracle::SynthData,
        strategy: MeanStrategy,
        lag: usize,
        time_df: usize,
    ) -> ModelSpec {
        let align = align_lagged(&data.panel.dates, &data.health.dates, lag).unwrap();
        let (design, _, _) = build_design(&data.health, time_df, 2).unwrap();
        let stats: Vec<DayStats> = data
            .panel
            .exposure
            .iter()
            .map(|row| DayStats::from_samples(row).unwrap())
            .collect();
        let xi = stats.iter().map(|s| s.mean).sum::<f64>() / stats.len() as f64;
        let s2m = stats.iter().map(|s| s.var).sum::<f64>() / stats.len() as f64;
        let family = match strategy {
            MeanStrategy::NormalExact => ExposureFamily::Normal,
            _ => ExposureFamily::LogNormal,
        };
        ModelSpec {
            strategy,
            lambda3: Lambda3Rule::Ratio,
            counts: align
                .count_idx
                .iter()
                .map(|&i| data.health.counts[i])
                .collect(),
            design: align.count_idx.iter().map(|&i| design[i].clone()).collect(),
            exposure_for_count: align.exposure_idx.clone(),
            exposure: ExposureInput::Sampled { stats, family },
            priors: Priors {
                xi,
                s2_mean: s2m,
                ..Priors::default()
            },
            lag,
            window_dates: align.window_dates.clone(),
            exposure_dates: data.panel.dates.clone(),
        }
    }

    pub(crate) fn fixed_spec_from_synth(
        data: &crate::synth_oracle::SynthData,
        series: Vec<f64>,
        lag: usize,
        time_df: usize,
    ) -> ModelSpec {
        let align = align_lagged(&data.panel.dates, &data.health.dates, lag).unwrap();
        let (design, _, _) = build_design(&data.health, time_df, 2).unwrap();
        ModelSpec {
            strategy: MeanStrategy::Fixed,
            lambda3: Lambda3Rule::Ratio,
            counts: align
                .count_idx
                .iter()
                .map(|&i| data.health.counts[i])
                .collect(),
            design: align.count_idx.iter().map(|&i| design[i].clone()).collect(),
            exposure_for_count: align.exposure_idx.clone(),
            exposure: ExposureInput::Fixed(series),
            priors: Priors::default(),
            lag,
            window_dates: align.window_dates.clone(),
            exposure_dates: data.panel.dates.clone(),
        }
    }

    fn small_scenario(seed: u64) -> SynthScenario {
        SynthScenario {
            days: 140,
            sites: 4,
            reps_per_site: 50,
            time_df: 6,
            seed,
            ..SynthScenario::default()
        }
    }

    #[test]
    fn adaptive_block_reaches_target_acceptance_on_gaussian_toy() {
        // 2-parameter correlated Gaussian target with known moments.
        let (m1, m2) = (1.0, -2.0);
        let (v1, v2, rho) = (1.0, 2.0, 0.3);
        let det = v1 * v2 * (1.0 - rho * rho);
        let logpost = |x: &[f64]| -> f64 {
            let (d1, d2) = (x[0] - m1, x[1] - m2);
            -0.5 * (v2 * d1 * d1 - 2.0 * rho * (v1 * v2).sqrt() * d1 * d2 + v1 * d2 * d2) / det
        };

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = AdaptiveBlock::new(vec![0.5, 0.5], 0.28);
        let mut state = vec![0.0, 0.0];
        let mut lp = logpost(&state);
        for _ in 0..4000 {
            let (acc, _) = mh_step(logpost, &mut state, &mut lp, &block, &mut rng);
            block.record(&state, acc);
        }
        block.freeze();

        let mut accepted = 0usize;
        let n = 40_000usize;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let (acc, _) = mh_step(logpost, &mut state, &mut lp, &block, &mut rng);
            if acc {
                accepted += 1;
            }
            for j in 0..2 {
                sums[j] += state[j];
                sq[j] += state[j] * state[j];
            }
        }
        let rate = accepted as f64 / n as f64;
        assert!(
            (0.2..=0.4).contains(&rate),
            "adapted acceptance rate {rate} outside [0.2, 0.4]"
        );
        // Detailed-balance smoke test: posterior means and variances.
        let mean1 = sums[0] / n as f64;
        let mean2 = sums[1] / n as f64;
        assert!((mean1 - m1).abs() < 0.08, "mean1 {mean1}");
        assert!((mean2 - m2).abs() < 0.11, "mean2 {mean2}");
        let var1 = sq[0] / n as f64 - mean1 * mean1;
        let var2 = sq[1] / n as f64 - mean2 * mean2;
        assert!((var1 - v1).abs() < 0.15 * v1, "var1 {var1}");
        assert!((var2 - v2).abs() < 0.15 * v2, "var2 {var2}");
    }

    #[test]
    fn zero_variance_proposal_always_accepted() {
        let logpost = |x: &[f64]| -x[0] * x[0];
        let mut block = AdaptiveBlock::new(vec![0.0], 0.3);
        block.set_scale(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = vec![0.7];
        let mut lp = logpost(&state);
        for _ in 0..100 {
            let (acc, log_ratio) = mh_step(logpost, &mut state, &mut lp, &block, &mut rng);
            assert!(acc, "identity move must be accepted");
            assert_eq!(log_ratio, 0.0);
            assert_eq!(state, vec![0.7]);
        }
    }

    #[test]
    fn acceptance_ratio_is_posterior_density_ratio() {
        let logpost = |x: &[f64]| -0.5 * x[0] * x[0] - x[0].cos();
        let block = AdaptiveBlock::new(vec![1.0], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut state = vec![0.3];
        let mut lp = logpost(&state);
        for _ in 0..200 {
            let before = state.clone();
            let lp_before = lp;
            let (acc, log_ratio) = mh_step(logpost, &mut state, &mut lp, &block, &mut rng);
            if acc {
                assert_abs_diff_eq!(
                    log_ratio,
                    logpost(&state) - logpost(&before),
                    epsilon = 1e-12
                );
            } else {
                assert_eq!(state, before);
                assert_eq!(lp, lp_before);
            }
        }
    }

    #[test]
    fn variance_gibbs_concentrates_at_zero_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values = vec![3.0; 1000];
        let draws: Vec<f64> = (0..200)
            .map(|_| update_variance_gibbs(&mut rng, &values, 3.0, 0.001))
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean < 1e-4, "conjugate shrinkage failed: mean {mean}");
    }

    #[test]
    fn variance_gibbs_matches_analytic_mean() {
        // Fixed residuals: posterior is IG(ε + n/2, ε + SS/2) with known mean.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..400).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let eps = 0.001;
        let ss: f64 = values.iter().map(|v| v * v).sum();
        let (a, b) = (eps + 200.0, eps + ss / 2.0);
        let analytic_mean = b / (a - 1.0);
        let analytic_var = b * b / ((a - 1.0) * (a - 1.0) * (a - 2.0));
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| update_variance_gibbs(&mut rng, &values, 0.0, eps))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (analytic_var / n as f64).sqrt();
        assert!(
            (mean - analytic_mean).abs() < 4.0 * se,
            "gibbs mean {mean} vs analytic {analytic_mean} (se {se})"
        );
    }

    #[test]
    fn variance_prior_epsilon_insensitive() {
        // Posterior mean of the conjugate variance barely moves across ε.
        let values: Vec<f64> = (0..363).map(|i| (i as f64 * 0.11).cos() * 1.5).collect();
        let ss: f64 = values.iter().map(|v| v * v).sum();
        let n = values.len() as f64;
        let mean_at = |eps: f64| (eps + ss / 2.0) / (eps + n / 2.0 - 1.0);
        let reference = mean_at(0.001);
        for eps in [0.01, 0.001, 0.0001] {
            let m = mean_at(eps);
            assert!(
                ((m - reference) / reference).abs() < 0.01,
                "ε={eps} shifts the posterior mean by more than 1%"
            );
        }
    }

    #[test]
    fn hierarchical_fit_bookkeeping_truncation_reproducibility() {
        let data = generate(&small_scenario(21)).unwrap();
        let spec = spec_from_synth(&data, MeanStrategy::LognormalTaylor, 2, 6);
        let settings = SamplerSettings::desk(300, 600, 3);
        let draws = run_chains(&spec, settings, 77).unwrap();

        // Thinning bookkeeping: stored draws = chains × iterations/thin.
        assert_eq!(draws.chains.len(), 2);
        for chain in &draws.chains {
            assert_eq!(chain.params.len(), 200);
            assert_eq!(chain.deviance.len(), 200);
        }

        // Truncation: every λ2 draw strictly positive.
        for chain in &draws.chains {
            for row in chain.lambda.as_ref().unwrap() {
                for &(l1, l2) in row {
                    assert!(l2 > 0.0, "λ2 draw {l2} not positive");
                    assert!(l1 > 0.0, "λ1 draw {l1} not positive for log-normal");
                }
            }
        }

        // Reproducibility: same seed, same draws.
        let again = run_chains(&spec, settings, 77).unwrap();
        assert_eq!(draws.chains[0].params, again.chains[0].params);
        assert_eq!(draws.chains[1].deviance, again.chains[1].deviance);

        // Param naming covers the hierarchy.
        assert_eq!(draws.param_names[0], "gamma");
        assert!(draws.param_names.contains(&"sigma2".into()));
        assert!(draws.param_names.contains(&"tau2".into()));
    }

    #[test]
    fn recovery_smoke_one_dataset() {
        // One desk-scale recovery: the 95% interval covers the truth.
        let scenario = SynthScenario {
            days: 200,
            sites: 4,
            reps_per_site: 50,
            time_df: 6,
            seed: 5150,
            ..SynthScenario::default()
        };
        let data = generate(&scenario).unwrap();
        let spec = spec_from_synth(&data, MeanStrategy::LognormalTaylor, 2, 6);
        let draws = run_chains(&spec, SamplerSettings::desk(2000, 6000, 5), 11).unwrap();
        let mut gammas = draws.gamma_draws();
        gammas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = gammas[(gammas.len() as f64 * 0.025) as usize];
        let hi = gammas[(gammas.len() as f64 * 0.975) as usize];
        assert!(
            lo <= scenario.gamma && scenario.gamma <= hi,
            "95% interval ({lo}, {hi}) misses γ = {}",
            scenario.gamma
        );
    }

    #[test]
    fn point_mass_gamma_matches_covariate_only_posterior() {
        let data = generate(&small_scenario(33)).unwrap();
        let series = data.panel.daily_means();
        let spec = fixed_spec_from_synth(&data, series, 2, 6);

        let mut fixed = SamplerSettings::desk(1200, 4000, 4);
        fixed.fix_gamma = Some(0.0);
        let a = run_chains(&spec, fixed, 5).unwrap();

        // Covariate-only contrast: γ free but exposure identically zero.
        let zero_spec = fixed_spec_from_synth(&data, vec![0.0; data.panel.n_days()], 2, 6);
        let b = run_chains(&zero_spec, SamplerSettings::desk(1200, 4000, 4), 6).unwrap();

        for name in a.param_names.iter().filter(|n| n.starts_with("alpha")) {
            let (ma, mb) = (a.pooled_mean(name), b.pooled_mean(name));
            let va = {
                let v = a.pooled(name);
                v.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / v.len() as f64
            };
            let tol = 4.0 * (va / 50.0).sqrt().max(0.01);
            assert!(
                (ma - mb).abs() < tol,
                "{name}: point-mass fit {ma} vs covariate-only {mb} (tol {tol})"
            );
        }
        // γ stays exactly at the point mass.
        assert!(a.gamma_draws().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn latent_mean_variant_respects_prior_bounds() {
        let data = generate(&small_scenario(44)).unwrap();
        let align = align_lagged(&data.panel.dates, &data.health.dates, 2).unwrap();
        let (design, _, _) = build_design(&data.health, 6, 2).unwrap();
        let spec = LatentMeanSpec {
            counts: align
                .count_idx
                .iter()
                .map(|&i| data.health.counts[i])
                .collect(),
            design: align.count_idx.iter().map(|&i| design[i].clone()).collect(),
            exposure_for_count: align.exposure_idx.clone(),
            day_means: data.panel.daily_means(),
            beta_mean: 0.0,
            beta_var: 1.0e4,
            lag: 2,
        };
        let draws =
            fit_latent_mean_variant(&spec, SamplerSettings::desk(400, 1200, 3), 9).unwrap();
        let sigma2 = draws.pooled("sigma2");
        assert!(!sigma2.is_empty());
        assert!(
            sigma2.iter().all(|&v| v > 0.0 && v < LATENT_VARIANCE_UPPER),
            "σ² draws must stay inside (0, 25)"
        );
    }

    #[test]
    fn draws_roundtrip_through_csv() {
        let data = generate(&SynthScenario {
            days: 60,
            sites: 2,
            reps_per_site: 20,
            time_df: 4,
            seed: 3,
            ..SynthScenario::default()
        })
        .unwrap();
        let spec = spec_from_synth(&data, MeanStrategy::LognormalTaylor, 2, 4);
        let draws = run_chains(&spec, SamplerSettings::desk(100, 200, 2), 13).unwrap();
        let dir = std::env::temp_dir().join(format!("expofit-draws-{}", std::process::id()));
        write_draws(&draws, &dir).unwrap();
        let loaded = load_draws(&dir).unwrap();
        // Debug: locate first mismatching lambda cell against the file text.
        for c in 0..draws.chains.len() {
            let mem = draws.chains[c].lambda.as_ref().unwrap();
            let got = loaded.chains[c].lambda.as_ref().unwrap();
            let text =
                std::fs::read_to_string(dir.join(format!("lambda_chain{c}.csv"))).unwrap();
            'outer: for (i, (mrow, grow)) in mem.iter().zip(got.iter()).enumerate() {
                for (d, (m, g)) in mrow.iter().zip(grow.iter()).enumerate() {
                    if m != g {
                        let line = text.lines().nth(i + 1).unwrap();
                        let cells: Vec<&str> = line.split(',').collect();
                        eprintln!(
                            "chain {c} first mismatch draw {i} day {d}: mem={:?}/{:?} loaded={:?}/{:?} file='{}'/'{}'",
                            m.0, m.1, g.0, g.1, cells[1 + 2 * d], cells[2 + 2 * d]
                        );
                        break 'outer;
                    }
                }
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(loaded.param_names, draws.param_names);
        assert_eq!(loaded.chains.len(), draws.chains.len());
        for (a, b) in loaded.chains.iter().zip(&draws.chains) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.deviance, b.deviance);
            assert_eq!(a.lambda, b.lambda);
        }
        assert_eq!(loaded.lambda_mean, draws.lambda_mean);
    }

    #[test]
    fn chains_below_two_are_rejected() {
        let data = generate(&SynthScenario {
            days: 60,
            sites: 2,
            reps_per_site: 10,
            time_df: 4,
            seed: 8,
            ..SynthScenario::default()
        })
        .unwrap();
        let spec = fixed_spec_from_synth(&data, data.panel.daily_means(), 2, 4);
        let mut settings = SamplerSettings::desk(10, 20, 1);
        settings.chains = 1;
        assert!(matches!(
            run_chains(&spec, settings, 1),
            Err(Error::SingleChain(1))
        ));
    }

    #[test]
    fn strategy_exposure_family_mismatch_is_rejected() {
        let data = generate(&SynthScenario {
            days: 60,
            sites: 2,
            reps_per_site: 10,
            time_df: 4,
            law: ExposureLaw::Normal { cv: 0.25 },
            seed: 8,
            ..SynthScenario::default()
        })
        .unwrap();
        // Log-normal strategy over a Normal-family input must fail validation.
        let mut spec = spec_from_synth(&data, MeanStrategy::NormalExact, 2, 4);
        spec.strategy = MeanStrategy::LognormalTaylor;
        assert!(spec.validate().is_err());
    }
}
