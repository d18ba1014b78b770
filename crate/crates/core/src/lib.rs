//! Two-stage toolkit for estimating exposure-response functions from
//! ambient pollution monitoring data.
//!
//! Stage 1 ([`micro_sim`]) tracks sampled individuals through
//! microenvironments driven by ambient monitor readings and daily
//! temperatures, producing a panel of simulated daily personal exposures.
//! Stage 2 ([`mcmc_engine`]) relates parametric summaries of those daily
//! exposure distributions to aggregate mortality counts through a
//! hierarchical Bayesian Poisson model, fitted by a mixture of Gibbs and
//! random-walk Metropolis-Hastings steps.
//!
//! Supporting modules: [`data_io`] (CSV ingestion and calendar alignment),
//! [`exposure_moments`] (daily moment triples and log-normal moment
//! matching), [`spline_basis`] (natural cubic spline covariates),
//! [`mean_models`] (the interchangeable Poisson mean functions),
//! [`diagnostics`] (DIC, Gelman-Rubin, posterior-predictive residuals),
//! [`risk_report`] (relative risks, exceedance curves, attenuation),
//! and [`synth_oracle`] (synthetic data generation and Monte Carlo
//! oracles used by the test suites).

pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod exposure_moments;
pub mod mcmc_engine;
pub mod mean_models;
pub mod micro_sim;
pub mod risk_report;
pub mod spline_basis;
pub mod synth_oracle;

pub use error::{Error, Result};
