//! Conjugate normal-mean power prior with known variance, used as an exact
//! oracle for type-I error behaviour of fixed, random and adaptive weights.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed;
use crate::stats;

/// How the external observations are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WeightPolicy {
    /// Every external observation gets `a_0`.
    Fixed(f64),
    /// Each external observation independently gets weight 1 or 0 with probability one half.
    Coin,
    /// Each external observation gets its Box's p-value under the current-data predictive.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianDesign {
    pub n1: usize,
    pub n0: usize,
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for GaussianDesign {
    fn default() -> Self {
        Self { n1: 100, n0: 100, sigma: 2f64.sqrt(), alpha: 0.025 }
    }
}

/// Type-I error of the fixed-weight power prior with both samples at `μ = 0`:
/// `P(Z > z_{1−α} sqrt((n_1 + a_0 n_0)/(n_1 + a_0² n_0)))`.
pub fn analytic_type1(n1: usize, n0: usize, a0: f64, alpha: f64) -> f64 {
    let (n1, n0) = (n1 as f64, n0 as f64);
    let z = stats::normal_quantile(1.0 - alpha);
    stats::normal_sf(z * ((n1 + a0 * n0) / (n1 + a0 * a0 * n0)).sqrt())
}

/// `2(1 − Φ(|y − ȳ_1| / (σ sqrt(1 + 1/n_1))))`, the Box's p-value of one external
/// observation under the posterior predictive from the current data.
pub fn adaptive_weight(y0: f64, mean1: f64, sigma: f64, n1: usize) -> f64 {
    let s = sigma * (1.0 + 1.0 / n1 as f64).sqrt();
    2.0 * stats::normal_sf((y0 - mean1).abs() / s)
}

/// Posterior mean and sd of `μ` under a flat initial prior.
pub fn posterior(current: &[f64], external: &[f64], weights: &[f64], sigma: f64) -> (f64, f64) {
    let n = current.len() as f64 + weights.iter().sum::<f64>();
    let s = current.iter().sum::<f64>() + external.iter().zip(weights).map(|(y, a)| a * y).sum::<f64>();
    (s / n, sigma / n.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianSummary {
    pub rejection_rate: f64,
    pub se: f64,
    pub mean_posterior_mean: f64,
    pub mean_posterior_sd: f64,
    pub mean_prob_positive: f64,
    pub n_reps: usize,
}

/// Simulate `H_0: μ ≤ 0` at `μ = 0`, rejecting when `P(μ > 0 | data) > 1 − α`.
pub fn gaussian_oracle(design: &GaussianDesign, policy: WeightPolicy, n_reps: usize, seed_: u64) -> Result<GaussianSummary> {
    if design.n1 == 0 || n_reps == 0 || !(design.sigma > 0.0) || !(0.0 < design.alpha && design.alpha < 1.0) {
        return Err(Error::Config("invalid Gaussian design".into()));
    }
    if let WeightPolicy::Fixed(a) = policy {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("fixed weight {a} outside [0, 1]")));
        }
    }
    let per_rep: Vec<(bool, f64, f64, f64)> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seed::stream(seed_, &[rep as u64]);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| design.sigma * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            let current = draw(design.n1);
            let external = draw(design.n0);
            let weights: Vec<f64> = match policy {
                WeightPolicy::Fixed(a) => vec![a; design.n0],
                WeightPolicy::Coin => (0..design.n0).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
                WeightPolicy::Adaptive => {
                    let m1 = stats::mean(&current);
                    external.iter().map(|&y| adaptive_weight(y, m1, design.sigma, design.n1)).collect()
                }
            };
            let (m, sd) = posterior(&current, &external, &weights, design.sigma);
            let prob = stats::normal_cdf(m / sd);
            (prob > 1.0 - design.alpha, m, sd, prob)
        })
        .collect();
    let n = n_reps as f64;
    let rate = per_rep.iter().filter(|r| r.0).count() as f64 / n;
    Ok(GaussianSummary {
        rejection_rate: rate,
        se: (rate * (1.0 - rate) / n).sqrt(),
        mean_posterior_mean: per_rep.iter().map(|r| r.1).sum::<f64>() / n,
        mean_posterior_sd: per_rep.iter().map(|r| r.2).sum::<f64>() / n,
        mean_prob_positive: per_rep.iter().map(|r| r.3).sum::<f64>() / n,
        n_reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_endpoints_and_minimum() {
        assert!((analytic_type1(100, 100, 0.0, 0.025) - 0.025).abs() < 1e-10);
        assert!((analytic_type1(100, 100, 1.0, 0.025) - 0.025).abs() < 1e-10);
        let m = analytic_type1(100, 100, 2f64.sqrt() - 1.0, 0.025);
        assert!((m - 0.01564).abs() < 5e-6, "{m}");
        for i in 1..100 {
            assert!(analytic_type1(100, 100, i as f64 / 100.0, 0.025) >= m - 1e-15);
        }
    }

    #[test]
    fn adaptive_weight_is_two_sided_tail() {
        assert_eq!(adaptive_weight(1.0, 1.0, 1.0, 10), 1.0);
        let s = (1.1f64).sqrt();
        assert!((adaptive_weight(1.0 + 1.96 * s, 1.0, 1.0, 10) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn posterior_by_hand() {
        let (m, sd) = posterior(&[1.0, 3.0], &[5.0, 7.0], &[0.5, 0.0], 2.0);
        assert!((m - 6.5 / 2.5).abs() < 1e-15);
        assert!((sd - 2.0 / 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn oracle_is_deterministic() {
        let d = GaussianDesign::default();
        let a = gaussian_oracle(&d, WeightPolicy::Adaptive, 200, 4).unwrap();
        assert_eq!(a, gaussian_oracle(&d, WeightPolicy::Adaptive, 200, 4).unwrap());
        assert!(gaussian_oracle(&d, WeightPolicy::Fixed(1.5), 10, 0).is_err());
    }
}
