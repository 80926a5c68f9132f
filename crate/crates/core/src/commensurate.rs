//! Commensurate-prior baseline: a drift `δ` between external and randomized
//! controls with `δ ~ N(0, σ²)` and `σ ~ Half-Cauchy(0, s)`, optionally with
//! case weights on the external rows, sampled by blocked adaptive random-walk
//! Metropolis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case_weights::WeightMatrix;
use crate::error::{Error, Result};
use crate::inference::{
    expand_rows, fit, log_posterior, FitOptions, LaplacePosterior, ParameterVector, PoissonData, Ridge, RowOptions,
    MIN_WEIGHT,
};
use crate::seed::{self, StreamRng};
use crate::stats;
use crate::survival::{SubjectRecord, TimePartition};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A point in the commensurate parameter space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommensurateState {
    pub theta: ParameterVector,
    pub delta: f64,
    pub sigma: f64,
}

/// `log N(δ | 0, σ²) + log Half-Cauchy(σ | 0, s)`.
pub fn log_drift_prior(delta: f64, sigma: f64, scale: f64) -> f64 {
    let normal = -0.5 * LN_2PI - sigma.ln() - 0.5 * (delta / sigma).powi(2);
    let half_cauchy = (2.0 / (std::f64::consts::PI * scale)).ln() - (1.0 + (sigma / scale).powi(2)).ln();
    normal + half_cauchy
}

/// Log posterior (up to a constant) on rows built with a drift column.
pub fn log_posterior_commensurate(state: &CommensurateState, data: &PoissonData, sigma_scale: f64) -> Result<f64> {
    if !(state.sigma > 0.0) || !state.sigma.is_finite() {
        return Err(Error::Domain(format!("drift scale must be positive, got {}", state.sigma)));
    }
    let idx = data
        .layout
        .drift_index()
        .ok_or_else(|| Error::InvalidInput("rows lack the external-control indicator column".into()))?;
    let mut theta = state.theta.to_flat();
    theta.insert(idx, state.delta);
    Ok(log_posterior(&theta, data)? + log_drift_prior(state.delta, state.sigma, sigma_scale))
}

/// A density whose coordinates are updated in blocks, with a cache that is
/// refreshed incrementally when one block changes.
pub trait BlockedTarget: Sync {
    type Cache: Clone + Send;

    fn blocks(&self) -> &[Vec<usize>];

    fn init(&self, x: &[f64]) -> (f64, Self::Cache);

    /// Log density at `x`, given `cache` valid for `x` except in block `changed`.
    fn update(&self, x: &[f64], cache: &Self::Cache, changed: usize) -> (f64, Self::Cache);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub sigma_scale: f64,
    pub seed: u64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self { chains: 4, iterations: 10_000, warmup: 2_500, thin: 1, sigma_scale: 0.3, seed: 0 }
    }
}

impl McmcOptions {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 {
            return Err(Error::Config("need at least one chain and thin >= 1".into()));
        }
        if self.warmup < 500 || self.iterations <= self.warmup {
            return Err(Error::Config(format!(
                "need iterations > warmup >= 500, got {} and {}",
                self.iterations, self.warmup
            )));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::Config("Half-Cauchy scale must be positive".into()));
        }
        Ok(())
    }
}

/// Post-warmup draws of one chain, stored row-major.
#[derive(Debug, Clone)]
pub struct Chain {
    pub dim: usize,
    pub draws: Vec<f64>,
    /// Post-warmup acceptance rate of each block.
    pub acceptance: Vec<f64>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.draws.iter().skip(i).step_by(self.dim).copied().collect()
    }
}

struct BlockState {
    index: Vec<usize>,
    chol: DMatrix<f64>,
    log_scale: f64,
    target: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
    n: usize,
    accepted: usize,
    tried: usize,
}

impl BlockState {
    fn new(index: Vec<usize>, cov: &DMatrix<f64>) -> Self {
        let d = index.len();
        let chol = regularised_cholesky(cov);
        Self {
            index,
            chol,
            log_scale: (2.38 / (d as f64).sqrt()).ln(),
            target: if d == 1 { 0.44 } else { 0.234 },
            mean: DVector::zeros(d),
            scatter: DMatrix::zeros(d, d),
            n: 0,
            accepted: 0,
            tried: 0,
        }
    }

    fn observe(&mut self, x: &[f64]) {
        let v = DVector::from_iterator(self.index.len(), self.index.iter().map(|&i| x[i]));
        self.n += 1;
        let delta = &v - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &v - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn refresh_covariance(&mut self) {
        let d = self.index.len();
        if self.n > 10 * d + 20 {
            let cov = &self.scatter / (self.n - 1) as f64;
            self.chol = regularised_cholesky(&cov);
        }
    }
}

fn regularised_cholesky(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let jitter = 1e-10 * (0..d).map(|i| cov[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut c = cov.clone();
    for i in 0..d {
        c[(i, i)] += jitter;
    }
    match c.clone().cholesky() {
        Some(ch) => ch.l(),
        None => DMatrix::from_diagonal(&DVector::from_iterator(d, (0..d).map(|i| c[(i, i)].abs().max(1e-12).sqrt()))),
    }
}

/// Run one chain of blocked adaptive random-walk Metropolis.
///
/// During warmup each block's proposal scale follows a Robbins-Monro
/// recursion towards its target acceptance rate and its proposal covariance
/// tracks the empirical covariance of the chain; both are frozen afterwards.
pub fn sample_chain<T: BlockedTarget>(
    target: &T,
    init: Vec<f64>,
    proposal_covs: &[DMatrix<f64>],
    iterations: usize,
    warmup: usize,
    thin: usize,
    rng: &mut StreamRng,
) -> Result<Chain> {
    let blocks = target.blocks();
    if proposal_covs.len() != blocks.len() {
        return Err(Error::Shape("one proposal covariance per block required".into()));
    }
    let dim = init.len();
    let mut x = init;
    let (mut lp, mut cache) = target.init(&x);
    if !lp.is_finite() {
        return Err(Error::Domain("initial state has zero density".into()));
    }
    let mut states: Vec<BlockState> =
        blocks.iter().zip(proposal_covs).map(|(b, c)| BlockState::new(b.clone(), c)).collect();
    let mut draws = Vec::with_capacity(dim * (iterations - warmup) / thin + dim);
    let adapt_cov_from = warmup / 4;
    let mut proposal = x.clone();
    for it in 0..iterations {
        let warming = it < warmup;
        for (b, st) in states.iter_mut().enumerate() {
            let d = st.index.len();
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let step = &st.chol * z * st.log_scale.exp();
            proposal.copy_from_slice(&x);
            for (k, &i) in st.index.iter().enumerate() {
                proposal[i] += step[k];
            }
            let (lp_new, cache_new) = target.update(&proposal, &cache, b);
            let log_ratio = lp_new - lp;
            let accept = log_ratio.is_finite() && (log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio);
            if accept {
                std::mem::swap(&mut x, &mut proposal);
                lp = lp_new;
                cache = cache_new;
            }
            if warming {
                let rate = (it as f64 + 1.0).powf(-0.6);
                let a = if accept { 1.0 } else { 0.0 };
                st.log_scale += rate * (a - st.target);
                if it >= adapt_cov_from {
                    st.observe(&x);
                    if (it + 1) % 50 == 0 {
                        st.refresh_covariance();
                    }
                }
            } else {
                st.tried += 1;
                st.accepted += accept as usize;
            }
        }
        if !warming && (it - warmup).is_multiple_of(thin) {
            draws.extend_from_slice(&x);
        }
    }
    Ok(Chain {
        dim,
        draws,
        acceptance: states.iter().map(|s| s.accepted as f64 / s.tried.max(1) as f64).collect(),
    })
}

/// Run several chains in parallel, each on its own derived stream.
pub fn sample_mcmc<T: BlockedTarget>(
    target: &T,
    inits: Vec<Vec<f64>>,
    proposal_covs: &[DMatrix<f64>],
    options: &McmcOptions,
) -> Result<Vec<Chain>> {
    options.validate()?;
    inits
        .into_par_iter()
        .enumerate()
        .map(|(c, init)| {
            let mut rng = seed::stream(options.seed, &[0x4348_4149, c as u64]);
            sample_chain(target, init, proposal_covs, options.iterations, options.warmup, options.thin, &mut rng)
        })
        .collect()
}

/// Split-R̂: each chain is halved and the Gelman-Rubin statistic computed over the halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if n < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..n], &c[n..2 * n]]).collect();
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| stats::mean(h)).collect();
    let within = halves.iter().map(|h| stats::variance(h)).sum::<f64>() / m;
    let between = n as f64 * stats::variance(&means);
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * within + between / n as f64;
    (var_plus / within).sqrt()
}

/// Reject `H0: γ ≥ 0` when the fraction of draws with `γ ≥ 0` is below `alpha`.
pub fn test_superiority_mcmc(gamma_draws: &[f64], alpha: f64) -> Result<bool> {
    if gamma_draws.len() < 1000 {
        return Err(Error::InvalidInput(format!("need at least 1000 draws, got {}", gamma_draws.len())));
    }
    Ok((gamma_draws.iter().filter(|&&g| g >= 0.0).count() as f64 / gamma_draws.len() as f64) < alpha)
}

/// Commensurate posterior in the sampler's coordinates `(α, β, γ, δ, log σ)`.
struct CommensurateTarget {
    k: usize,
    p: usize,
    blocks: Vec<Vec<usize>>,
    /// `(group * K + interval, w H, x)` per active row; groups are RCT control, treated, external.
    rows: Vec<(usize, f64, Vec<f64>)>,
    events: Vec<f64>,
    event_x: Vec<f64>,
    sigma_scale: f64,
}

impl CommensurateTarget {
    fn new(data: &PoissonData, sigma_scale: f64) -> Self {
        let k = data.layout.n_intervals;
        let p = data.layout.n_covariates;
        let mut rows = Vec::new();
        let mut events = vec![0.0; 3 * k];
        let mut event_x = vec![0.0; p];
        for r in data.rows.iter().filter(|r| r.weight >= MIN_WEIGHT) {
            let g = if r.external > 0.0 { 2 } else if r.treatment > 0.0 { 1 } else { 0 };
            let slot = g * k + r.interval;
            events[slot] += r.weight * r.response;
            for (e, x) in event_x.iter_mut().zip(&r.covariates) {
                *e += r.weight * r.response * x;
            }
            rows.push((slot, r.weight * r.offset.exp(), r.covariates.clone()));
        }
        let alpha_block: Vec<usize> = (0..k).chain([k + p, k + p + 1]).collect();
        let mut blocks = vec![alpha_block];
        if p > 0 {
            blocks.push((k..k + p).collect());
        }
        blocks.push(vec![k + p + 2]);
        Self { k, p, blocks, rows, events, event_x, sigma_scale }
    }

    fn exposure_sums(&self, beta: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; 3 * self.k];
        for (slot, wh, x) in &self.rows {
            let xb: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            s[*slot] += wh * xb.exp();
        }
        s
    }

    fn density(&self, x: &[f64], sums: &[f64]) -> f64 {
        let (k, p) = (self.k, self.p);
        let (gamma, delta, log_sigma) = (x[k + p], x[k + p + 1], x[k + p + 2]);
        let mut ll: f64 = self.event_x.iter().zip(&x[k..k + p]).map(|(a, b)| a * b).sum();
        for g in 0..3 {
            let shift = match g {
                1 => gamma,
                2 => delta,
                _ => 0.0,
            };
            for i in 0..k {
                let slot = g * k + i;
                let eta = x[i] + shift;
                ll += self.events[slot] * eta - sums[slot] * eta.exp();
            }
        }
        let sigma = log_sigma.exp();
        ll + log_drift_prior(delta, sigma, self.sigma_scale) + log_sigma
    }
}

impl BlockedTarget for CommensurateTarget {
    type Cache = Vec<f64>;

    fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    fn init(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let s = self.exposure_sums(&x[self.k..self.k + self.p]);
        (self.density(x, &s), s)
    }

    fn update(&self, x: &[f64], cache: &Vec<f64>, changed: usize) -> (f64, Vec<f64>) {
        if self.p > 0 && changed == 1 {
            self.init(x)
        } else {
            (self.density(x, cache), cache.clone())
        }
    }
}

/// Posterior draws of a commensurate fit.
#[derive(Debug, Clone)]
pub struct CommensurateFit {
    pub chains: Vec<Chain>,
    pub n_intervals: usize,
    pub n_covariates: usize,
    pub rhat_gamma: f64,
    /// Covariate means subtracted before sampling.
    pub covariate_means: Vec<f64>,
}

impl CommensurateFit {
    fn pooled(&self, i: usize) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.coordinate(i)).collect()
    }

    pub fn gamma_index(&self) -> usize {
        self.n_intervals + self.n_covariates
    }

    pub fn gamma_draws(&self) -> Vec<f64> {
        self.pooled(self.gamma_index())
    }

    pub fn delta_draws(&self) -> Vec<f64> {
        self.pooled(self.gamma_index() + 1)
    }

    pub fn sigma_draws(&self) -> Vec<f64> {
        self.pooled(self.gamma_index() + 2).into_iter().map(f64::exp).collect()
    }

    pub fn gamma_chains(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.coordinate(self.gamma_index())).collect()
    }
}

/// Rows with an external-control indicator column and covariates centred on
/// their overall mean.
pub fn commensurate_rows(
    subjects: &[SubjectRecord],
    partition: &TimePartition,
    weights: Option<&WeightMatrix>,
) -> Result<(PoissonData, Vec<f64>)> {
    let mut data = expand_rows(subjects, partition, weights, RowOptions { drift: true, ..Default::default() })?;
    let p = data.layout.n_covariates;
    let n = subjects.len().max(1) as f64;
    let means: Vec<f64> =
        (0..p).map(|c| subjects.iter().map(|s| s.covariates[c]).sum::<f64>() / n).collect();
    for r in &mut data.rows {
        for (x, m) in r.covariates.iter_mut().zip(&means) {
            *x -= m;
        }
    }
    Ok((data, means))
}

fn laplace_start(data: &PoissonData) -> Result<LaplacePosterior> {
    let idx = data.layout.drift_index().expect("drift column");
    fit(data, &FitOptions::default()).or_else(|_| {
        let options = FitOptions { ridge: vec![Ridge { index: idx, center: 0.0, precision: 1.0 }], ..Default::default() };
        fit(data, &options)
    })
}

/// Fit the (optionally case-weighted) commensurate model by MCMC.
pub fn fit_commensurate(
    subjects: &[SubjectRecord],
    partition: &TimePartition,
    weights: Option<&WeightMatrix>,
    options: &McmcOptions,
) -> Result<CommensurateFit> {
    options.validate()?;
    let (data, means) = commensurate_rows(subjects, partition, weights)?;
    let start = laplace_start(&data)?;
    let target = CommensurateTarget::new(&data, options.sigma_scale);
    let (k, p) = (target.k, target.p);
    let dim = k + p + 3;

    let d_lap = start.layout.dim();
    let lap_chol = regularised_cholesky(&start.covariance);
    let mut init_rng = seed::stream(options.seed, &[0x494e_4954]);
    let inits: Vec<Vec<f64>> = (0..options.chains)
        .map(|c| {
            let jitter = if c == 0 {
                DVector::zeros(d_lap)
            } else {
                &lap_chol * DVector::from_iterator(d_lap, (0..d_lap).map(|_| init_rng.sample::<f64, _>(StandardNormal)))
            };
            let mut x: Vec<f64> = (&start.mode + jitter).iter().copied().collect();
            let delta = x[k + p + 1];
            let z: f64 = init_rng.sample(StandardNormal);
            x.push(delta.abs().max(0.05).ln() + if c == 0 { 0.0 } else { 0.5 * z });
            x
        })
        .collect();

    let mut full = DMatrix::zeros(dim, dim);
    full.view_mut((0, 0), (d_lap, d_lap)).copy_from(&start.covariance);
    full[(dim - 1, dim - 1)] = 1.0;
    let covs: Vec<DMatrix<f64>> = target
        .blocks()
        .iter()
        .map(|b| DMatrix::from_fn(b.len(), b.len(), |i, j| full[(b[i], b[j])]))
        .collect();

    let chains = sample_mcmc(&target, inits, &covs, options)?;
    let gamma: Vec<Vec<f64>> = chains.iter().map(|c| c.coordinate(k + p)).collect();
    let rhat_gamma = split_rhat(&gamma);
    if rhat_gamma > 1.05 {
        log::warn!("split R-hat on the treatment effect is {rhat_gamma:.3}");
    }
    Ok(CommensurateFit { chains, n_intervals: k, n_covariates: p, rhat_gamma, covariate_means: means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::marginal_treatment;
    use crate::sim::{generate_trial, ScenarioSpec};

    struct StdNormal {
        blocks: Vec<Vec<usize>>,
    }

    impl BlockedTarget for StdNormal {
        type Cache = ();
        fn blocks(&self) -> &[Vec<usize>] {
            &self.blocks
        }
        fn init(&self, x: &[f64]) -> (f64, ()) {
            (-0.5 * x.iter().map(|v| v * v).sum::<f64>(), ())
        }
        fn update(&self, x: &[f64], _: &(), _: usize) -> (f64, ()) {
            self.init(x)
        }
    }

    #[test]
    fn standard_normal_moments() {
        let t = StdNormal { blocks: vec![vec![0, 1], vec![2]] };
        let covs = vec![DMatrix::identity(2, 2) * 4.0, DMatrix::identity(1, 1) * 0.01];
        let opts = McmcOptions { chains: 4, iterations: 15_000, warmup: 2_500, seed: 3, ..Default::default() };
        let chains = sample_mcmc(&t, vec![vec![3.0, -3.0, 2.0]; 4], &covs, &opts).unwrap();
        for i in 0..3 {
            let x: Vec<f64> = chains.iter().flat_map(|c| c.coordinate(i)).collect();
            assert_eq!(x.len(), 50_000);
            let (m, v) = (stats::mean(&x), stats::variance(&x));
            assert!(m.abs() < 0.05, "coord {i}: mean {m}");
            assert!((v - 1.0).abs() < 0.05, "coord {i}: var {v}");
        }
        for c in &chains {
            assert!((0.15..0.55).contains(&c.acceptance[0]), "{:?}", c.acceptance);
            assert!((0.3..0.6).contains(&c.acceptance[1]), "{:?}", c.acceptance);
        }
    }

    #[test]
    fn chains_are_reproducible() {
        let t = StdNormal { blocks: vec![vec![0]] };
        let covs = vec![DMatrix::identity(1, 1)];
        let opts = McmcOptions { chains: 2, iterations: 2000, warmup: 500, seed: 9, ..Default::default() };
        let a = sample_mcmc(&t, vec![vec![0.0]; 2], &covs, &opts).unwrap();
        let b = sample_mcmc(&t, vec![vec![0.0]; 2], &covs, &opts).unwrap();
        assert_eq!(a[1].draws, b[1].draws);
    }

    #[test]
    fn rhat_detects_separated_chains() {
        let mut rng = seed::stream(1, &[]);
        let mut draw = |m: f64| (0..1000).map(|_| m + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
        let same = vec![draw(0.0), draw(0.0), draw(0.0)];
        assert!(split_rhat(&same) < 1.01);
        let apart = vec![draw(0.0), draw(3.0)];
        assert!(split_rhat(&apart) > 1.5);
    }

    #[test]
    fn superiority_by_draws() {
        assert!(test_superiority_mcmc(&vec![-0.1; 2000], 0.025).unwrap());
        let sym: Vec<f64> = (0..2000).map(|i| i as f64 - 999.5).collect();
        assert!(!test_superiority_mcmc(&sym, 0.025).unwrap());
        assert!(test_superiority_mcmc(&[0.0; 10], 0.025).is_err());
    }

    #[test]
    fn drift_prior_ratio_by_hand() {
        let s = 0.3;
        let lhs = log_drift_prior(0.2, 0.5, s) - log_drift_prior(-0.1, 0.2, s);
        let n = |d: f64, sg: f64| (-(d * d) / (2.0 * sg * sg)).exp() / (sg * (2.0 * std::f64::consts::PI).sqrt());
        let hc = |sg: f64| 2.0 / (std::f64::consts::PI * s * (1.0 + (sg / s).powi(2)));
        let rhs = (n(0.2, 0.5) * hc(0.5) / (n(-0.1, 0.2) * hc(0.2))).ln();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn small_trial() -> (Vec<SubjectRecord>, TimePartition) {
        let spec = ScenarioSpec { n_treat: 60, n_rct_control: 40, n_external: 40, ..Default::default() };
        (generate_trial(&spec, 11).unwrap(), TimePartition::new(spec.cutpoints).unwrap())
    }

    #[test]
    fn zero_drift_reduces_to_pooled_likelihood() {
        let (s, p) = small_trial();
        let (data, _) = commensurate_rows(&s, &p, None).unwrap();
        let mut pooled = expand_rows(&s, &p, None, RowOptions::default()).unwrap();
        for r in &mut pooled.rows {
            r.covariates = data.rows[0].covariates.iter().map(|_| 0.0).collect();
        }
        let mut flat_data = data.clone();
        for r in &mut flat_data.rows {
            r.covariates.iter_mut().for_each(|x| *x = 0.0);
        }
        let theta = ParameterVector { alpha: vec![-5.5, -6.0], beta: vec![0.01, 0.1], gamma: Some(-0.2), drift: None };
        let sigma = 0.4;
        let state = CommensurateState { theta: theta.clone(), delta: 0.0, sigma };
        let lhs = log_posterior_commensurate(&state, &flat_data, 0.3).unwrap() - log_drift_prior(0.0, sigma, 0.3);
        let rhs = log_posterior(&theta.to_flat(), &pooled).unwrap();
        assert!((lhs - rhs).abs() < 1e-9 * rhs.abs());
        let bad = CommensurateState { sigma: 0.0, ..state };
        assert!(matches!(log_posterior_commensurate(&bad, &data, 0.3), Err(Error::Domain(_))));
    }

    #[test]
    fn sampler_target_matches_public_density() {
        let (s, p) = small_trial();
        let (data, _) = commensurate_rows(&s, &p, None).unwrap();
        let t = CommensurateTarget::new(&data, 0.3);
        let constant: f64 = data.rows.iter().map(|r| r.weight * r.response * r.offset).sum();
        let mut rng = seed::stream(2, &[]);
        let mut prev: Option<(f64, f64)> = None;
        for _ in 0..5 {
            let x: Vec<f64> = vec![
                rng.random_range(-6.0..-5.0),
                rng.random_range(-6.5..-5.5),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-2.0..0.0),
            ];
            let (lp, _) = t.init(&x);
            let state = CommensurateState {
                theta: ParameterVector { alpha: x[..2].to_vec(), beta: x[2..4].to_vec(), gamma: Some(x[4]), drift: None },
                delta: x[5],
                sigma: x[6].exp(),
            };
            let direct = log_posterior_commensurate(&state, &data, 0.3).unwrap() - constant + x[6];
            if let Some((a, b)) = prev {
                assert!(((lp - a) - (direct - b)).abs() < 1e-8);
            }
            prev = Some((lp, direct));
        }
    }

    #[test]
    fn unit_weights_equal_unweighted_model() {
        let (s, p) = small_trial();
        let ones = WeightMatrix::constant(&s, &p, 1.0).unwrap();
        let (a, _) = commensurate_rows(&s, &p, None).unwrap();
        let (b, _) = commensurate_rows(&s, &p, Some(&ones)).unwrap();
        let state = CommensurateState {
            theta: ParameterVector { alpha: vec![-5.0, -5.5], beta: vec![0.0, 0.2], gamma: Some(-0.1), drift: None },
            delta: 0.1,
            sigma: 0.2,
        };
        assert_eq!(
            log_posterior_commensurate(&state, &a, 0.3).unwrap(),
            log_posterior_commensurate(&state, &b, 0.3).unwrap()
        );
    }

    #[test]
    fn zero_weights_match_no_borrowing() {
        let (s, p) = small_trial();
        let zeros = WeightMatrix::constant(&s, &p, 0.0).unwrap();
        let opts = McmcOptions { iterations: 8000, warmup: 2000, seed: 5, ..Default::default() };
        let f = fit_commensurate(&s, &p, Some(&zeros), &opts).unwrap();
        let mut nb = expand_rows(&s, &p, None, RowOptions::default()).unwrap();
        nb.set_constant_external_weight(0.0);
        let lap = marginal_treatment(&fit(&nb, &FitOptions::default()).unwrap()).unwrap();
        let g = f.gamma_draws();
        let se = stats::variance(&g).sqrt() / (g.len() as f64 / 50.0).sqrt();
        assert!((stats::mean(&g) - lap.estimate).abs() < 4.0 * se + 0.01, "{} vs {}", stats::mean(&g), lap.estimate);
        assert!((stats::variance(&g).sqrt() / lap.sd - 1.0).abs() < 0.1);
        assert!(f.rhat_gamma < 1.05);
    }

    #[test]
    fn gamma_estimate_invariant_to_thinning_and_chain_count() {
        let (s, p) = small_trial();
        let base = McmcOptions { chains: 4, iterations: 6000, warmup: 1000, seed: 8, ..Default::default() };
        let a = fit_commensurate(&s, &p, None, &base).unwrap().gamma_draws();
        let thinned = McmcOptions { thin: 5, iterations: 26_000, warmup: 1000, ..base.clone() };
        let b = fit_commensurate(&s, &p, None, &thinned).unwrap().gamma_draws();
        let two = McmcOptions { chains: 2, iterations: 11_000, ..base.clone() };
        let c = fit_commensurate(&s, &p, None, &two).unwrap().gamma_draws();
        let sd = stats::variance(&a).sqrt();
        // effective sample size of random-walk output is well below the raw count
        let mcse = sd / (a.len() as f64 / 30.0).sqrt();
        for other in [&b, &c] {
            assert!((stats::mean(&a) - stats::mean(other)).abs() < 3.0 * std::f64::consts::SQRT_2 * mcse);
        }
    }
}
