//! The interchangeable Poisson log-mean functions.
//!
//! Every strategy produces `ln μ_t` for a day from an exposure summary, the
//! log relative-risk coefficient γ, and the covariate contribution zᵀα:
//!
//! - fixed: `γ·x + zᵀα` (single daily exposure value);
//! - normal-exact: `γλ1 + γ²λ2/2 + zᵀα` (exact for Gaussian exposures);
//! - lognormal-taylor: `γλ1 + γ²λ2/2 + γ³λ3/6 + zᵀα` (three-term
//!   expansion for right-skewed exposures, whose moment-generating
//!   function does not exist);
//! - general-g: `g(γλ1) + γ²·g2·λ2 + γ³·g3·λ3 + zᵀα` with pluggable
//!   curvature constants and response function `g` (identity by default).

use crate::error::{Error, Result};
use crate::exposure_moments::DailyMoments;

/// Which mean function a fit uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanStrategy {
    /// Single fixed exposure value per day (ambient average or panel mean).
    Fixed,
    /// Exact Gaussian-exposure mean function.
    NormalExact,
    /// Three-term expansion for log-normal exposures.
    LognormalTaylor,
    /// General response with supplied second/third derivative constants.
    GeneralG { g2: f64, g3: f64 },
}

impl MeanStrategy {
    /// The exposure part of the log-mean (everything except zᵀα),
    /// evaluated with identity `g` for the general strategy.
    pub fn exposure_term(&self, gamma: f64, m: &DailyMoments) -> f64 {
        match *self {
            MeanStrategy::Fixed => gamma * m.lambda1,
            MeanStrategy::NormalExact => gamma * m.lambda1 + gamma * gamma * m.lambda2 / 2.0,
            MeanStrategy::LognormalTaylor => {
                gamma * m.lambda1
                    + gamma * gamma * m.lambda2 / 2.0
                    + gamma * gamma * gamma * m.lambda3 / 6.0
            }
            MeanStrategy::GeneralG { g2, g3 } => {
                gamma * m.lambda1
                    + gamma * gamma * g2 * m.lambda2
                    + gamma * gamma * gamma * g3 * m.lambda3
            }
        }
    }

    /// Whether the strategy reads the day-level moment hierarchy.
    pub fn uses_moments(&self) -> bool {
        !matches!(self, MeanStrategy::Fixed)
    }
}

fn dot(covars: &[f64], alpha: &[f64]) -> f64 {
    covars.iter().zip(alpha).map(|(z, a)| z * a).sum()
}

/// `ln μ = γ·x + zᵀα`: the fixed-exposure models.
pub fn linpred_fixed(exposure: f64, gamma: f64, covars: &[f64], alpha: &[f64]) -> f64 {
    gamma * exposure + dot(covars, alpha)
}

/// `ln μ = γλ1 + γ²λ2/2 + zᵀα`: exact for normally distributed exposures.
pub fn linpred_normal_exact(
    moments: &DailyMoments,
    gamma: f64,
    covars: &[f64],
    alpha: &[f64],
) -> f64 {
    MeanStrategy::NormalExact.exposure_term(gamma, moments) + dot(covars, alpha)
}

/// `ln μ = γλ1 + γ²λ2/2 + γ³λ3/6 + zᵀα`: the three-term expansion.
pub fn linpred_lognormal_taylor(
    moments: &DailyMoments,
    gamma: f64,
    covars: &[f64],
    alpha: &[f64],
) -> f64 {
    MeanStrategy::LognormalTaylor.exposure_term(gamma, moments) + dot(covars, alpha)
}

/// `ln μ = g(γλ1) + γ²·g2·λ2 + γ³·g3·λ3 + zᵀα` for a registered response
/// function.
pub fn linpred_general_g(
    moments: &DailyMoments,
    gamma: f64,
    covars: &[f64],
    alpha: &[f64],
    g: &ResponseG,
    g2: f64,
    g3: f64,
) -> f64 {
    g.apply(gamma * moments.lambda1)
        + gamma * gamma * g2 * moments.lambda2
        + gamma * gamma * gamma * g3 * moments.lambda3
        + dot(covars, alpha)
}

/// A user-supplied exposure response function.
///
/// Registration checks the contract numerically on a grid: `g(0) = 0` and
/// nondecreasing monotonicity over the stated range. Boundedness and
/// smoothness remain the caller's responsibility (they cannot be decided
/// from finitely many evaluations).
pub struct ResponseG {
    f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    name: String,
}

impl ResponseG {
    pub fn identity() -> ResponseG {
        ResponseG {
            f: Box::new(|u| u),
            name: "identity".into(),
        }
    }

    pub fn new(
        name: &str,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        check_range: (f64, f64),
    ) -> Result<ResponseG> {
        let at_zero = f(0.0);
        if at_zero.abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "response function '{name}' has g(0) = {at_zero}, must be 0"
            )));
        }
        let (lo, hi) = check_range;
        if !(hi > lo) {
            return Err(Error::Invalid("empty response check range".into()));
        }
        let steps = 512;
        let mut prev = f(lo);
        if !prev.is_finite() {
            return Err(Error::Invalid(format!(
                "response function '{name}' not finite at {lo}"
            )));
        }
        for i in 1..=steps {
            let u = lo + (hi - lo) * i as f64 / steps as f64;
            let v = f(u);
            if !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "response function '{name}' not finite at {u}"
                )));
            }
            if v < prev - 1e-12 {
                return Err(Error::Invalid(format!(
                    "response function '{name}' decreases near {u}"
                )));
            }
            prev = v;
        }
        Ok(ResponseG {
            f: Box::new(f),
            name: name.to_string(),
        })
    }

    pub fn apply(&self, u: f64) -> f64 {
        (self.f)(u)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl std::fmt::Debug for ResponseG {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ResponseG({})", self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_oracle::{mc_expectation_exp, MgfLaw};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn moments(l1: f64, l2: f64, l3: f64) -> DailyMoments {
        DailyMoments {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            k: 800,
        }
    }

    #[test]
    fn null_effect_leaves_covariates_only() {
        let z = [1.0, 0.4, -1.2];
        let a = [2.0, 0.3, 0.1];
        let za: f64 = z.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert_eq!(linpred_fixed(25.0, 0.0, &z, &a), za);
        let m = moments(20.0, 25.0, 5.0);
        assert_eq!(linpred_lognormal_taylor(&m, 0.0, &z, &a), za);
    }

    #[test]
    fn fixed_exposure_relative_risk_scale() {
        let lp = linpred_fixed(10.0, 0.00212, &[], &[]);
        assert_abs_diff_eq!(lp, 0.0212, epsilon = 1e-12);
        assert_abs_diff_eq!(lp.exp(), 1.0214, epsilon = 1e-4);
    }

    #[test]
    fn fixed_is_linear_in_exposure() {
        let z = [1.0, -0.5];
        let a = [0.7, 0.2];
        let za: f64 = z.iter().zip(&a).map(|(x, y)| x * y).sum();
        let g = 0.004;
        for (x, y) in [(3.0, 11.0), (0.0, 25.0), (18.5, 1.5)] {
            let sum = linpred_fixed(x, g, &z, &a) + linpred_fixed(y, g, &z, &a) - za;
            assert_abs_diff_eq!(sum, linpred_fixed(x + y, g, &z, &a), epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_exact_degenerate_variance_reduces_to_fixed() {
        let m = moments(14.0, 0.0, 0.0);
        let z = [1.0];
        let a = [0.5];
        assert_eq!(
            linpred_normal_exact(&m, 0.003, &z, &a),
            linpred_fixed(14.0, 0.003, &z, &a)
        );
    }

    #[test]
    fn normal_exact_matches_standard_normal_mgf() {
        // γ=1, λ1=0, λ2=1: ln μ = 1/2, the N(0,1) MGF at 1.
        let m = moments(0.0, 1.0, 0.0);
        assert_eq!(linpred_normal_exact(&m, 1.0, &[], &[]), 0.5);
    }

    #[test]
    fn normal_exact_agrees_with_monte_carlo() {
        // X ~ N(5, 4), γ = 0.1, 10⁷ draws.
        let m = moments(5.0, 4.0, 0.0);
        let lp = linpred_normal_exact(&m, 0.1, &[], &[]);
        let mc = mc_expectation_exp(
            &MgfLaw::Normal {
                mean: 5.0,
                var: 4.0,
            },
            0.1,
            10_000_000,
            31,
        );
        assert!(
            (lp.exp() - mc.mean).abs() < 3.0 * mc.se,
            "exact {} vs MC {} ± {}",
            lp.exp(),
            mc.mean,
            mc.se
        );
    }

    #[test]
    fn taylor_correction_terms_are_negligible_at_study_scales() {
        // λ1=20, λ2=25, γ=0.005, ratio-form λ3 = (1.25)(4.25) = 5.3125.
        let l3 = crate::exposure_moments::lambda3_ratio(20.0, 25.0).unwrap();
        assert_abs_diff_eq!(l3, 5.3125, epsilon = 1e-12);
        let g = 0.005f64;
        let term1 = g * 20.0;
        let term2 = g * g * 25.0 / 2.0;
        let term3 = g * g * g * l3 / 6.0;
        assert_abs_diff_eq!(term1, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(term2, 3.125e-4, epsilon = 1e-12);
        assert_abs_diff_eq!(term3, 1.107e-7, epsilon = 1e-10);
        assert!(term2 / term1 < 0.01);
        assert!(term3 / term1 < 0.01);

        let m = moments(20.0, 25.0, l3);
        let lp = linpred_lognormal_taylor(&m, g, &[], &[]);
        assert_abs_diff_eq!(lp, term1 + term2 + term3, epsilon = 1e-15);
    }

    #[test]
    fn taylor_tracks_monte_carlo_for_small_effects() {
        // Matched log-normal, small γλ1: relative error below 1e-3.
        let (l1, cv, g) = (20.0, 0.3, 0.004);
        let l2 = (cv * l1) * (cv * l1);
        let l3 = crate::exposure_moments::lambda3_ratio(l1, l2).unwrap();
        let m = moments(l1, l2, l3);
        let lp = linpred_lognormal_taylor(&m, g, &[], &[]);
        let mc = mc_expectation_exp(
            &MgfLaw::LogNormalMoments { mean: l1, var: l2 },
            g,
            2_000_000,
            77,
        );
        let rel = (lp.exp() - mc.mean).abs() / mc.mean;
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn general_g_with_half_and_sixth_matches_taylor() {
        let m = moments(17.0, 12.0, 4.0);
        let z = [1.0, 2.0];
        let a = [0.1, 0.05];
        let lhs = linpred_general_g(&m, 0.006, &z, &a, &ResponseG::identity(), 0.5, 1.0 / 6.0);
        let rhs = linpred_lognormal_taylor(&m, 0.006, &z, &a);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-15);

        let truncated = linpred_general_g(&m, 0.006, &z, &a, &ResponseG::identity(), 0.0, 0.0);
        assert_abs_diff_eq!(
            truncated,
            linpred_fixed(m.lambda1, 0.006, &z, &a),
            epsilon = 1e-15
        );
    }

    #[test]
    fn general_g_monotone_in_mean_exposure() {
        let g = 0.01;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..30 {
            let l1 = 1.0 + i as f64;
            let m = moments(l1, 5.0, 2.0);
            let lp = linpred_general_g(&m, g, &[], &[], &ResponseG::identity(), 0.5, 1.0 / 6.0);
            assert!(lp > prev);
            prev = lp;
        }
    }

    #[test]
    fn strategy_nesting_over_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let l1 = rng.gen_range(0.5..60.0);
            let l2 = rng.gen_range(0.0..200.0);
            let g = rng.gen_range(-0.02..0.02);
            let z = [1.0, rng.gen_range(-2.0..2.0)];
            let a = [rng.gen_range(-1.0..3.0), rng.gen_range(-0.5..0.5)];

            let taylor_no3 = linpred_lognormal_taylor(&moments(l1, l2, 0.0), g, &z, &a);
            let exact = linpred_normal_exact(&moments(l1, l2, 0.0), g, &z, &a);
            assert!((taylor_no3 - exact).abs() <= 1e-12 * exact.abs().max(1.0));

            let exact_no2 = linpred_normal_exact(&moments(l1, 0.0, 0.0), g, &z, &a);
            let fixed = linpred_fixed(l1, g, &z, &a);
            assert!((exact_no2 - fixed).abs() <= 1e-12 * fixed.abs().max(1.0));

            // Poisson-mean validity.
            assert!(linpred_lognormal_taylor(&moments(l1, l2, 1.0), g, &z, &a).exp() > 0.0);
        }
    }

    #[test]
    fn response_registration_enforces_contract() {
        assert!(ResponseG::new("scaled", |u| 2.0 * u, (-1.0, 1.0)).is_ok());
        // g(0) ≠ 0.
        assert!(ResponseG::new("shifted", |u| u + 1.0, (-1.0, 1.0)).is_err());
        // Not monotone over the checked range.
        assert!(ResponseG::new("square", |u| u * u, (-1.0, 1.0)).is_err());
        // Bounded saturating response is fine.
        assert!(ResponseG::new("saturating", |u: f64| u.tanh(), (-1.0, 1.0)).is_ok());
    }
}
