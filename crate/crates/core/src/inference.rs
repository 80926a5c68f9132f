//! Posterior inference for `(log λ, β, γ)` under per-row weights.
//!
//! The weighted piecewise-exponential likelihood factorises into one Poisson
//! term per (subject, at-risk interval) with `log H` as offset and the case
//! weight multiplying the row's log-likelihood. Under a flat prior the
//! posterior mode is the weighted Poisson MLE, found by Newton-Raphson, and the
//! posterior is approximated by a normal centred there with covariance equal
//! to the inverse negative Hessian.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::case_weights::WeightMatrix;
use crate::error::{Error, Result};
use crate::stats;
use crate::survival::{decompose, SubjectRecord, TimePartition};

/// Column layout of the Poisson design: interval indicators, covariates, then
/// the optional treatment and external-source (drift) columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DesignLayout {
    pub n_intervals: usize,
    pub n_covariates: usize,
    pub treatment: bool,
    pub drift: bool,
}

impl DesignLayout {
    pub fn dim(&self) -> usize {
        self.n_intervals + self.n_covariates + self.treatment as usize + self.drift as usize
    }

    pub fn beta_range(&self) -> std::ops::Range<usize> {
        self.n_intervals..self.n_intervals + self.n_covariates
    }

    pub fn gamma_index(&self) -> Option<usize> {
        self.treatment.then_some(self.n_intervals + self.n_covariates)
    }

    pub fn drift_index(&self) -> Option<usize> {
        self.drift.then_some(self.n_intervals + self.n_covariates + self.treatment as usize)
    }
}

/// Which indicator plays the role of the Poisson response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Event,
    /// Censoring treated as the event (used to fit the censoring hazard).
    Censoring,
}

#[derive(Debug, Clone, Copy)]
pub struct RowOptions {
    pub treatment: bool,
    pub drift: bool,
    pub response: Response,
}

impl Default for RowOptions {
    fn default() -> Self {
        Self { treatment: true, drift: false, response: Response::Event }
    }
}

/// One (subject, interval) Poisson observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonRow {
    pub interval: usize,
    pub response: f64,
    /// `log H`, the log exposure in this interval.
    pub offset: f64,
    pub weight: f64,
    pub covariates: Vec<f64>,
    pub treatment: f64,
    pub external: f64,
    /// `(external control index, interval)` when the weight comes from a weight matrix.
    pub weight_slot: Option<(usize, usize)>,
}

impl PoissonRow {
    #[inline]
    fn linear_predictor(&self, layout: &DesignLayout, theta: &[f64]) -> f64 {
        let mut eta = theta[self.interval];
        let b = layout.n_intervals;
        for (c, x) in self.covariates.iter().enumerate() {
            eta += x * theta[b + c];
        }
        if let Some(g) = layout.gamma_index() {
            eta += self.treatment * theta[g];
        }
        if let Some(d) = layout.drift_index() {
            eta += self.external * theta[d];
        }
        eta
    }

    #[inline]
    fn fill_design(&self, layout: &DesignLayout, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[self.interval] = 1.0;
        let b = layout.n_intervals;
        out[b..b + self.covariates.len()].copy_from_slice(&self.covariates);
        if let Some(g) = layout.gamma_index() {
            out[g] = self.treatment;
        }
        if let Some(d) = layout.drift_index() {
            out[d] = self.external;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoissonData {
    pub layout: DesignLayout,
    pub rows: Vec<PoissonRow>,
}

impl PoissonData {
    /// Replace the weights of external rows from a weight matrix.
    pub fn set_external_weights(&mut self, weights: &WeightMatrix) -> Result<()> {
        for row in &mut self.rows {
            if let Some((j, k)) = row.weight_slot {
                row.weight = *weights
                    .rows()
                    .get(j)
                    .and_then(|r| r.get(k))
                    .ok_or_else(|| Error::Shape(format!("no weight for external control {j}, interval {k}")))?;
            }
        }
        Ok(())
    }

    /// Set every external row's weight to `a0`.
    pub fn set_constant_external_weight(&mut self, a0: f64) {
        for row in &mut self.rows {
            if row.external > 0.0 {
                row.weight = a0;
            }
        }
    }

    /// Weighted number of observed responses.
    pub fn weighted_events(&self) -> f64 {
        self.rows.iter().map(|r| r.weight * r.response).sum()
    }
}

/// Expand subjects into Poisson rows on `partition`.
///
/// RCT rows get weight 1. External controls take their per-interval weights
/// from `weights` (in order of appearance among external subjects), or 1 when
/// no matrix is supplied.
pub fn expand_rows(
    subjects: &[SubjectRecord],
    partition: &TimePartition,
    weights: Option<&WeightMatrix>,
    options: RowOptions,
) -> Result<PoissonData> {
    let n_cov = subjects.first().map(|s| s.covariates.len()).unwrap_or(0);
    let n_external = subjects.iter().filter(|s| s.is_external()).count();
    if let Some(w) = weights {
        if w.len() != n_external {
            return Err(Error::Shape(format!(
                "weight matrix has {} rows for {} external controls",
                w.len(),
                n_external
            )));
        }
    }
    let layout = DesignLayout {
        n_intervals: partition.len(),
        n_covariates: n_cov,
        treatment: options.treatment,
        drift: options.drift,
    };
    let mut rows = Vec::with_capacity(subjects.len() * 2);
    let mut j = 0usize;
    for s in subjects {
        s.validate()?;
        if s.covariates.len() != n_cov {
            return Err(Error::Shape(format!(
                "subject {} has {} covariates, expected {}",
                s.id,
                s.covariates.len(),
                n_cov
            )));
        }
        let d = decompose(s.time, s.event, partition)?;
        let row_weights: Option<&[f64]> = match (s.is_external(), weights) {
            (true, Some(w)) => {
                let r = &w.rows()[j];
                if r.len() != d.terminal + 1 {
                    return Err(Error::Shape(format!(
                        "external control {} has {} weights but is at risk in {} intervals",
                        s.id,
                        r.len(),
                        d.terminal + 1
                    )));
                }
                Some(r)
            }
            _ => None,
        };
        let indicator = match options.response {
            Response::Event => s.event,
            Response::Censoring => !s.event,
        };
        for (k, &h) in d.exposures.iter().enumerate() {
            rows.push(PoissonRow {
                interval: k,
                response: if k == d.terminal && indicator { 1.0 } else { 0.0 },
                offset: h.ln(),
                weight: row_weights.map(|w| w[k]).unwrap_or(1.0),
                covariates: s.covariates.clone(),
                treatment: if s.treated { 1.0 } else { 0.0 },
                external: if s.is_external() { 1.0 } else { 0.0 },
                weight_slot: (s.is_external() && weights.is_some()).then_some((j, k)),
            });
        }
        if s.is_external() {
            j += 1;
        }
    }
    Ok(PoissonData { layout, rows })
}

/// Structured view of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterVector {
    /// Log baseline rates, one per interval.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Option<f64>,
    pub drift: Option<f64>,
}

impl ParameterVector {
    pub fn from_flat(layout: &DesignLayout, theta: &[f64]) -> Self {
        Self {
            alpha: theta[..layout.n_intervals].to_vec(),
            beta: theta[layout.beta_range()].to_vec(),
            gamma: layout.gamma_index().map(|i| theta[i]),
            drift: layout.drift_index().map(|i| theta[i]),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend(&self.beta);
        v.extend(self.gamma);
        v.extend(self.drift);
        v
    }

    pub fn rates(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a.exp()).collect()
    }
}

/// Independent Gaussian penalty on selected coordinates (a weakly-informative ridge).
#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    pub index: usize,
    pub center: f64,
    pub precision: f64,
}

fn check_theta(layout: &DesignLayout, theta: &[f64]) -> Result<()> {
    if theta.len() != layout.dim() {
        return Err(Error::Shape(format!("parameter length {} != {}", theta.len(), layout.dim())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite parameter {theta:?}")));
    }
    Ok(())
}

/// `Σ w (y (η + log H) − exp(η + log H))` over rows: the weighted Poisson
/// log-likelihood, equal to the log posterior under the flat prior.
pub fn log_posterior(theta: &[f64], data: &PoissonData) -> Result<f64> {
    check_theta(&data.layout, theta)?;
    Ok(log_posterior_unchecked(theta, data, MIN_WEIGHT))
}

fn log_posterior_unchecked(theta: &[f64], data: &PoissonData, min_weight: f64) -> f64 {
    let mut acc = 0.0;
    for r in &data.rows {
        if r.weight < min_weight {
            continue;
        }
        let lp = r.linear_predictor(&data.layout, theta) + r.offset;
        acc += r.weight * (r.response * lp - lp.exp());
    }
    acc
}

pub fn gradient(theta: &[f64], data: &PoissonData) -> Result<DVector<f64>> {
    check_theta(&data.layout, theta)?;
    Ok(grad_hess(theta, data, MIN_WEIGHT, false).0)
}

pub fn hessian(theta: &[f64], data: &PoissonData) -> Result<DMatrix<f64>> {
    check_theta(&data.layout, theta)?;
    Ok(grad_hess(theta, data, MIN_WEIGHT, true).1)
}

fn grad_hess(theta: &[f64], data: &PoissonData, min_weight: f64, with_hessian: bool) -> (DVector<f64>, DMatrix<f64>) {
    let p = data.layout.dim();
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let mut d = vec![0.0; p];
    for r in &data.rows {
        if r.weight < min_weight {
            continue;
        }
        let mu = (r.linear_predictor(&data.layout, theta) + r.offset).exp();
        r.fill_design(&data.layout, &mut d);
        let resid = r.weight * (r.response - mu);
        for a in 0..p {
            g[a] += resid * d[a];
        }
        if with_hessian {
            let wm = r.weight * mu;
            for a in 0..p {
                if d[a] == 0.0 {
                    continue;
                }
                let wa = wm * d[a];
                for b in a..p {
                    h[(a, b)] -= wa * d[b];
                }
            }
        }
    }
    if with_hessian {
        for a in 0..p {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
    }
    (g, h)
}

/// Rows whose weight falls below this are dropped from the design.
pub const MIN_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub ridge: Vec<Ridge>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            max_halvings: 20,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-8,
            ridge: Vec::new(),
        }
    }
}

/// Normal approximation to the posterior at its mode.
#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    pub layout: DesignLayout,
    pub mode: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Log posterior at the mode (Poisson form, including any ridge penalty).
    pub log_posterior: f64,
    /// Weighted survival log-likelihood at the mode, `Σ w[y η − H e^η]`
    /// (the `y log H` constant removed so it is comparable across partitions).
    pub log_likelihood: f64,
    /// Weighted count of observed responses.
    pub weighted_events: f64,
    pub iterations: usize,
}

impl LaplacePosterior {
    /// Build from parts; the covariance must be symmetric positive semi-definite.
    pub fn from_parts(layout: DesignLayout, mode: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let p = layout.dim();
        if mode.len() != p || covariance.nrows() != p || covariance.ncols() != p {
            return Err(Error::Shape("mode/covariance do not match layout".into()));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::InvalidInput("covariance must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(covariance.clone());
        if eig.eigenvalues.min() < -1e-12 * covariance.amax().max(1.0) {
            return Err(Error::SingularDesign("covariance is not positive semi-definite".into()));
        }
        Ok(Self {
            layout,
            mode: DVector::from_vec(mode),
            covariance,
            log_posterior: f64::NAN,
            log_likelihood: f64::NAN,
            weighted_events: f64::NAN,
            iterations: 0,
        })
    }

    pub fn parameters(&self) -> ParameterVector {
        ParameterVector::from_flat(&self.layout, self.mode.as_slice())
    }

    /// Mean and variance of the linear combination `c·θ`.
    pub fn linear_combination(&self, c: &[f64]) -> (f64, f64) {
        let cv = DVector::from_column_slice(c);
        let mean = cv.dot(&self.mode);
        let var = (&self.covariance * &cv).dot(&cv);
        (mean, var)
    }

    pub fn n_parameters(&self) -> usize {
        self.layout.dim()
    }
}

/// Newton-Raphson for the posterior mode followed by the Laplace approximation.
pub fn fit(data: &PoissonData, options: &FitOptions) -> Result<LaplacePosterior> {
    let layout = data.layout;
    let p = layout.dim();
    let active: Vec<&PoissonRow> = data.rows.iter().filter(|r| r.weight >= MIN_WEIGHT).collect();
    if active.is_empty() {
        return Err(Error::SingularDesign("no rows with positive weight".into()));
    }
    let (events, exposure) = active
        .iter()
        .fold((0.0, 0.0), |(e, h), r| (e + r.weight * r.response, h + r.weight * r.offset.exp()));
    if !(events > 0.0) && options.ridge.is_empty() {
        return Err(Error::SingularDesign("no weighted events".into()));
    }
    let mut theta = vec![0.0; p];
    theta[..layout.n_intervals].fill((events.max(0.5) / exposure).ln());

    let objective = |t: &[f64]| -> f64 {
        let mut v = log_posterior_unchecked(t, data, MIN_WEIGHT);
        for r in &options.ridge {
            v -= 0.5 * r.precision * (t[r.index] - r.center).powi(2);
        }
        v
    };
    let derivatives = |t: &[f64]| {
        let (mut g, mut h) = grad_hess(t, data, MIN_WEIGHT, true);
        for r in &options.ridge {
            g[r.index] -= r.precision * (t[r.index] - r.center);
            h[(r.index, r.index)] -= r.precision;
        }
        (g, h)
    };

    let mut f = objective(&theta);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    let mut max_grad = f64::INFINITY;
    while iterations < options.max_iterations {
        let (g, h) = derivatives(&theta);
        info = -h;
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularDesign("information matrix is not positive definite".into()))?;
        let step = chol.solve(&g);
        max_grad = g.amax();
        if !max_grad.is_finite() {
            return Err(Error::Domain("non-finite gradient".into()));
        }
        if max_grad < options.gradient_tolerance && step.norm() < options.step_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=options.max_halvings {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let fc = objective(&cand);
            if fc.is_finite() && fc >= f - 1e-12 * (1.0 + f.abs()) {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations, max_grad });
    }
    let eig = SymmetricEigen::new(info);
    let min_eig = eig.eigenvalues.min();
    if !(min_eig > 0.0) {
        return Err(Error::SingularDesign(format!("smallest Hessian eigenvalue {min_eig:.3e} at mode")));
    }
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let mut covariance = &eig.eigenvectors * inv * eig.eigenvectors.transpose();
    covariance = 0.5 * (&covariance + covariance.transpose());

    let offset_const: f64 = active.iter().map(|r| r.weight * r.response * r.offset).sum();
    Ok(LaplacePosterior {
        layout,
        mode: DVector::from_vec(theta.clone()),
        covariance,
        log_posterior: f,
        log_likelihood: log_posterior_unchecked(&theta, data, MIN_WEIGHT) - offset_const,
        weighted_events: events,
        iterations,
    })
}

/// Marginal normal summary of the treatment log hazard ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreatmentEffect {
    pub estimate: f64,
    pub sd: f64,
}

impl TreatmentEffect {
    pub fn hazard_ratio(&self) -> f64 {
        self.estimate.exp()
    }

    /// Equal-tailed credible interval for `γ` at the given level.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let z = stats::normal_quantile(0.5 + 0.5 * level);
        (self.estimate - z * self.sd, self.estimate + z * self.sd)
    }

    /// Hazard-ratio scale credible interval.
    pub fn hr_interval(&self, level: f64) -> (f64, f64) {
        let (lo, hi) = self.interval(level);
        (lo.exp(), hi.exp())
    }

    /// `Pr(γ ≥ 0 | data)` under the marginal normal.
    pub fn prob_nonnegative(&self) -> f64 {
        stats::normal_cdf(self.estimate / self.sd)
    }
}

pub fn marginal_treatment(post: &LaplacePosterior) -> Result<TreatmentEffect> {
    let g = post
        .layout
        .gamma_index()
        .ok_or_else(|| Error::InvalidInput("posterior has no treatment effect".into()))?;
    Ok(TreatmentEffect { estimate: post.mode[g], sd: post.covariance[(g, g)].sqrt() })
}

/// Reject `H0: γ ≥ 0` when `Pr(γ ≥ 0 | data) < alpha`.
pub fn test_superiority(effect: &TreatmentEffect, alpha: f64) -> bool {
    effect.prob_nonnegative() < alpha
}

/// Weighted survival log-likelihood `Σ w[y η − H e^η]` of `data` at `theta`.
pub fn survival_log_likelihood(theta: &[f64], data: &PoissonData) -> Result<f64> {
    check_theta(&data.layout, theta)?;
    let offset_const: f64 =
        data.rows.iter().filter(|r| r.weight >= MIN_WEIGHT).map(|r| r.weight * r.response * r.offset).sum();
    Ok(log_posterior_unchecked(theta, data, MIN_WEIGHT) - offset_const)
}

/// `−2 ℓ(θ̂; rows) + d log(n_eff)`: the fitted mode scored on `rows`, with `n_eff`
/// the weighted event count of the fit.
///
/// Scoring every method on the same unit-weight rows makes values comparable
/// across methods and partitions; scoring on the fitted rows gives `−2 ℓ̂ + d log n_eff`.
pub fn bic(post: &LaplacePosterior, rows: &PoissonData) -> Result<f64> {
    if rows.layout != post.layout {
        return Err(Error::Shape("rows do not match the fitted layout".into()));
    }
    let ll = survival_log_likelihood(post.mode.as_slice(), rows)?;
    Ok(-2.0 * ll + post.n_parameters() as f64 * post.weighted_events.ln())
}
