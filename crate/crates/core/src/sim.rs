//! Trial generation and operating-characteristics estimation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{average_weight, transform, CalibrationParams, TransformMode};
use crate::case_weights::{compute_all, WeightMatrix, WeightOptions, WeightResult};
use crate::commensurate::{fit_commensurate, CommensurateFit, McmcOptions};
use crate::error::{Error, Result};
use crate::inference::{expand_rows, fit, marginal_treatment, test_superiority, FitOptions, PoissonData, RowOptions};
use crate::seed;
use crate::stats;
use crate::survival::{
    build_partition, event_times, sample_observation, PiecewiseHazard, Source, SubjectRecord, TimePartition,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Confounding {
    None,
    /// A random subset of controls has hazard multiplied by `2^(m β_3)`.
    PartialContamination,
    /// Every external control has hazard multiplied by `e^(β_3)`.
    Shift,
    /// External hazard multiplied by `e^(β_3)` after the first cutpoint only.
    PartialShift,
}

impl fmt::Display for Confounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confounding::None => "none",
            Confounding::PartialContamination => "partial_contamination",
            Confounding::Shift => "shift",
            Confounding::PartialShift => "partial_shift",
        })
    }
}

/// A data-generating design. Rates are per day; age enters the hazard centred at `age_mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_treat: usize,
    pub n_rct_control: usize,
    pub n_external: usize,
    pub cutpoints: Vec<f64>,
    pub rates: Vec<f64>,
    pub censor_rates: Vec<f64>,
    pub beta_age: f64,
    pub beta_male: f64,
    pub gamma: f64,
    pub confounding: Confounding,
    pub beta3: f64,
    /// Scale factor on external censoring times: the external censoring hazard is
    /// `λ^c / censoring_multiplier` (1.4 "low", 0.9 "high" censoring).
    pub censoring_multiplier: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub p_male: f64,
    /// Day from which the treatment effect applies (proportional effect when absent).
    pub effect_onset: Option<f64>,
    /// Analysis partition built from RCT events with this many intervals;
    /// the generating cutpoints are used when absent.
    pub analysis_intervals: Option<usize>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            n_treat: 200,
            n_rct_control: 100,
            n_external: 100,
            cutpoints: vec![0.0, 180.0],
            rates: vec![1.0 / 300.0, 1.0 / 420.0],
            censor_rates: vec![1.0 / 600.0, 1.0 / 600.0],
            beta_age: 0.015,
            beta_male: 0.20,
            gamma: 0.0,
            confounding: Confounding::None,
            beta3: 0.0,
            censoring_multiplier: 1.4,
            age_mean: 64.0,
            age_sd: 9.0,
            age_min: 18.0,
            age_max: 90.0,
            p_male: 0.62,
            effect_onset: None,
            analysis_intervals: None,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_treat == 0 || self.n_rct_control == 0 || self.n_external == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        if !(self.censoring_multiplier > 0.0) {
            return Err(Error::Config("censoring multiplier must be positive".into()));
        }
        if !(self.age_sd > 0.0) || !(self.age_min < self.age_max) || !(0.0..=1.0).contains(&self.p_male) {
            return Err(Error::Config("invalid covariate sampler".into()));
        }
        self.hazards().map(|_| ())
    }

    fn hazards(&self) -> Result<(PiecewiseHazard, PiecewiseHazard)> {
        let p = TimePartition::new(self.cutpoints.clone())?;
        Ok((PiecewiseHazard::new(p.clone(), self.rates.clone())?, PiecewiseHazard::new(p, self.censor_rates.clone())?))
    }
}

fn sample_covariates<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> (f64, f64) {
    let age_law = Normal::new(spec.age_mean, spec.age_sd).expect("validated sd");
    let age = loop {
        let a = age_law.sample(rng);
        if (spec.age_min..=spec.age_max).contains(&a) {
            break a;
        }
    };
    let male = if rng.random_bool(spec.p_male) { 1.0 } else { 0.0 };
    (age, male)
}

/// Draw `m` with `P(m = 0) = 0.68` and `P(m = ±2k) = 0.02` for `k = 1..8`.
fn sample_contamination<R: Rng + ?Sized>(rng: &mut R) -> i32 {
    let u: f64 = rng.random();
    if u < 0.68 {
        return 0;
    }
    let slot = (((u - 0.68) / 0.02) as i32).min(15);
    let k = slot / 2 + 1;
    if slot % 2 == 0 { 2 * k } else { -2 * k }
}

/// Simulate one trial: treated and control RCT arms plus external controls.
pub fn generate_trial(spec: &ScenarioSpec, seed_: u64) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let (control_h, censor_h) = spec.hazards()?;
    let treated_h = match spec.effect_onset {
        Some(onset) => control_h.scaled_after(onset, spec.gamma.exp())?,
        None => control_h.scaled(spec.gamma.exp())?,
    };
    let external_censor = censor_h.scaled(1.0 / spec.censoring_multiplier)?;
    let partial_shift_h = if spec.confounding == Confounding::PartialShift {
        let tau1 = *spec
            .cutpoints
            .get(1)
            .ok_or_else(|| Error::Config("partial shift needs at least two generating intervals".into()))?;
        Some(control_h.scaled_after(tau1, spec.beta3.exp())?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(spec.n_treat + spec.n_rct_control + spec.n_external);
    let groups = [(0u64, spec.n_treat), (1, spec.n_rct_control), (2, spec.n_external)];
    for (group, n) in groups {
        for i in 0..n {
            let mut rng = seed::stream(seed_, &[group, i as u64]);
            let (age, male) = sample_covariates(spec, &mut rng);
            let eta = spec.beta_age * (age - spec.age_mean) + spec.beta_male * male;
            let (hazard, shift, censor) = match group {
                0 => (&treated_h, 0.0, &censor_h),
                1 => (&control_h, 0.0, &censor_h),
                _ => {
                    let x3 = match spec.confounding {
                        Confounding::None | Confounding::PartialShift => 0.0,
                        Confounding::Shift => 1.0,
                        Confounding::PartialContamination => sample_contamination(&mut rng) as f64 * 2f64.ln(),
                    };
                    (partial_shift_h.as_ref().unwrap_or(&control_h), x3 * spec.beta3, &external_censor)
                }
            };
            let (time, event) = sample_observation((hazard, eta + shift), Some((censor, 0.0)), &mut rng);
            out.push(SubjectRecord {
                id: format!("{}{}", ["t", "c", "e"][group as usize], i),
                time,
                event,
                covariates: vec![age, male],
                treated: group == 0,
                source: if group == 2 { Source::External } else { Source::Rct },
            });
        }
    }
    Ok(out)
}

/// Analysis partition: generating cutpoints, or balanced on RCT events.
pub fn analysis_partition(spec: &ScenarioSpec, subjects: &[SubjectRecord]) -> Result<TimePartition> {
    match spec.analysis_intervals {
        Some(k) => build_partition(&event_times(subjects.iter().filter(|s| !s.is_external())), k),
        None => TimePartition::new(spec.cutpoints.clone()),
    }
}

/// Analysis methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    NoBorrow,
    Pool,
    Fixed(f64),
    Untransformed,
    Shrunk,
    Discounted,
    Commensurate,
    CwCommensurate,
}

impl Method {
    pub fn needs_weights(&self) -> bool {
        matches!(self, Method::Untransformed | Method::Shrunk | Method::Discounted | Method::CwCommensurate)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::NoBorrow => f.write_str("no_borrow"),
            Method::Pool => f.write_str("pool"),
            Method::Fixed(a) => write!(f, "fixed:{a}"),
            Method::Untransformed => f.write_str("untransformed"),
            Method::Shrunk => f.write_str("shrunk"),
            Method::Discounted => f.write_str("discounted"),
            Method::Commensurate => f.write_str("commensurate"),
            Method::CwCommensurate => f.write_str("cw_commensurate"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "no_borrow" => Method::NoBorrow,
            "pool" => Method::Pool,
            "untransformed" => Method::Untransformed,
            "shrunk" => Method::Shrunk,
            "discounted" => Method::Discounted,
            "commensurate" => Method::Commensurate,
            "cw_commensurate" => Method::CwCommensurate,
            other => match other.strip_prefix("fixed:") {
                Some(a) => {
                    let a: f64 = a.parse().map_err(|_| Error::Config(format!("bad fixed weight in {other:?}")))?;
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::Config(format!("fixed weight {a} outside [0, 1]")));
                    }
                    Method::Fixed(a)
                }
                None => return Err(Error::Config(format!("unknown method {other:?}"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One method's result on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub estimate: f64,
    pub sd: f64,
    /// `Pr(γ ≥ 0 | data)`.
    pub prob_nonnegative: f64,
    pub reject: bool,
    /// 95% credible interval on the hazard-ratio scale.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean external weight used by the analysis.
    pub a_bar: f64,
    pub rhat: Option<f64>,
}

impl MethodOutcome {
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Method-independent analysis settings.
#[derive(Debug, Clone, Default)]
pub struct AnalysisContext {
    pub params: CalibrationParams,
    pub mcmc: McmcOptions,
}

/// A generated dataset with its analysis partition, raw weights and Poisson rows.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub subjects: Vec<SubjectRecord>,
    pub partition: TimePartition,
    pub weights: Option<WeightResult>,
    pub data: PoissonData,
}

pub fn replicate_seed(global: u64, spec: &ScenarioSpec, rep: usize) -> u64 {
    seed::derive(global, &[seed::hash_str(&spec.name), rep as u64])
}

/// Generate a dataset and optionally its raw weights (`weights.seed` is replaced by one derived from `seed_`).
pub fn prepare_replicate(spec: &ScenarioSpec, seed_: u64, weights: Option<&WeightOptions>) -> Result<Replicate> {
    let subjects = generate_trial(spec, seed_)?;
    let partition = analysis_partition(spec, &subjects)?;
    prepare_dataset(subjects, partition, seed_, weights)
}

/// Build the replicate structures for an existing dataset.
pub fn prepare_dataset(
    subjects: Vec<SubjectRecord>,
    partition: TimePartition,
    seed_: u64,
    weights: Option<&WeightOptions>,
) -> Result<Replicate> {
    let weights = match weights {
        Some(w) => {
            let opts = WeightOptions { seed: seed::derive(seed_, &[0x5745_4947]), ..w.clone() };
            Some(compute_all(&subjects, &partition, &opts)?)
        }
        None => None,
    };
    let data = expand_rows(&subjects, &partition, weights.as_ref().map(|w| &w.matrix), RowOptions::default())?;
    Ok(Replicate { subjects, partition, weights, data })
}

fn laplace_outcome(data: &PoissonData, alpha: f64, a_bar: f64) -> Result<MethodOutcome> {
    let eff = marginal_treatment(&fit(data, &FitOptions::default())?)?;
    let (ci_low, ci_high) = eff.hr_interval(0.95);
    Ok(MethodOutcome {
        estimate: eff.estimate,
        sd: eff.sd,
        prob_nonnegative: eff.prob_nonnegative(),
        reject: test_superiority(&eff, alpha),
        ci_low,
        ci_high,
        a_bar,
        rhat: None,
    })
}

/// Final weights used by a weighted method.
pub fn method_weights(method: Method, raw: &WeightMatrix, params: &CalibrationParams) -> Result<WeightMatrix> {
    match method {
        Method::Untransformed => Ok(raw.clone()),
        Method::Shrunk => transform(raw, params, TransformMode::Shrunk),
        Method::Discounted | Method::CwCommensurate => transform(raw, params, TransformMode::Discounted),
        other => Err(Error::InvalidInput(format!("{other} has no data-driven weights"))),
    }
}

/// Analyse a prepared replicate with one method.
pub fn analyze(rep: &mut Replicate, method: Method, ctx: &AnalysisContext, seed_: u64) -> Result<MethodOutcome> {
    let alpha = ctx.params.alpha;
    let raw = || {
        rep.weights
            .as_ref()
            .map(|w| w.matrix.clone())
            .ok_or_else(|| Error::InvalidInput(format!("{method} needs case weights")))
    };
    match method {
        Method::NoBorrow | Method::Pool | Method::Fixed(_) => {
            let a0 = match method {
                Method::NoBorrow => 0.0,
                Method::Pool => 1.0,
                Method::Fixed(a) => a,
                _ => unreachable!(),
            };
            rep.data.set_constant_external_weight(a0);
            laplace_outcome(&rep.data, alpha, a0)
        }
        Method::Untransformed | Method::Shrunk | Method::Discounted => {
            let w = method_weights(method, &raw()?, &ctx.params)?;
            rep.data.set_external_weights(&w)?;
            laplace_outcome(&rep.data, alpha, average_weight(&w)?)
        }
        Method::Commensurate | Method::CwCommensurate => analyze_mcmc(rep, method, ctx, seed_).map(|(o, _)| o),
    }
}

/// Commensurate-prior analysis of a prepared replicate, returning the draws as well.
pub fn analyze_mcmc(
    rep: &Replicate,
    method: Method,
    ctx: &AnalysisContext,
    seed_: u64,
) -> Result<(MethodOutcome, CommensurateFit)> {
    let w = match method {
        Method::Commensurate => None,
        Method::CwCommensurate => {
            let raw = rep.weights.as_ref().ok_or_else(|| Error::InvalidInput(format!("{method} needs case weights")))?;
            Some(method_weights(method, &raw.matrix, &ctx.params)?)
        }
        other => return Err(Error::InvalidInput(format!("{other} is not an MCMC method"))),
    };
    let a_bar = w.as_ref().map(average_weight).transpose()?.unwrap_or(1.0);
    let opts = McmcOptions { seed: seed::derive(seed_, &[0x4d43_4d43]), ..ctx.mcmc.clone() };
    let fitted = fit_commensurate(&rep.subjects, &rep.partition, w.as_ref(), &opts)?;
    let g = fitted.gamma_draws();
    let mut sorted = g.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let prob = g.iter().filter(|&&x| x >= 0.0).count() as f64 / g.len() as f64;
    let outcome = MethodOutcome {
        estimate: stats::mean(&g),
        sd: stats::variance(&g).sqrt(),
        prob_nonnegative: prob,
        reject: prob < ctx.params.alpha,
        ci_low: stats::quantile_sorted(&sorted, 0.025).exp(),
        ci_high: stats::quantile_sorted(&sorted, 0.975).exp(),
        a_bar,
        rhat: Some(fitted.rhat_gamma),
    };
    Ok((outcome, fitted))
}

/// Operating characteristics of one method over the replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatingCharacteristics {
    pub method: Method,
    pub rejection_rate: f64,
    pub rejection_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub bias: f64,
    pub mean_ci_width: f64,
    pub mean_a_bar: f64,
    pub mean_prob_nonnegative: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Fraction of fits with split-R̂ on γ at most 1.05 (MCMC methods only).
    pub rhat_ok: Option<f64>,
}

/// Mean raw weights, averaged within each dataset then across datasets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub overall: f64,
    pub events: f64,
    pub censored: f64,
    /// Mean weight among controls whose observation time falls in interval `k`.
    pub by_survival_interval: Vec<f64>,
    /// Mean of `a_{j,k}` over all controls at risk in interval `k`.
    pub by_risk_interval: Vec<f64>,
    /// Share of datasets contributing to each entry of `by_survival_interval`.
    pub datasets: usize,
}

/// Per-dataset means of a weight matrix: overall, by event status, by observed-time interval and by risk interval.
fn dataset_weight_means(w: &WeightMatrix, external: &[&SubjectRecord], partition: &TimePartition) -> Vec<Option<f64>> {
    let k = partition.len();
    let mut sums = vec![(0.0, 0usize); 3 + 2 * k];
    for (row, s) in w.rows().iter().zip(external) {
        let kj = partition.interval_of(s.time);
        for (i, &a) in row.iter().enumerate() {
            let mut add = |slot: usize| {
                sums[slot].0 += a;
                sums[slot].1 += 1;
            };
            add(0);
            add(if s.event { 1 } else { 2 });
            add(3 + kj);
            add(3 + k + i);
        }
    }
    sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()
}

/// Summarise raw weights across replicates.
pub fn weight_summary(replicates: &[(WeightMatrix, Vec<SubjectRecord>, TimePartition)]) -> Option<WeightSummary> {
    let first = replicates.first()?;
    let k = first.2.len();
    let per: Vec<Vec<Option<f64>>> = replicates
        .iter()
        .map(|(w, subjects, p)| {
            let ext: Vec<&SubjectRecord> = subjects.iter().filter(|s| s.is_external()).collect();
            dataset_weight_means(w, &ext, p)
        })
        .collect();
    let col = |i: usize| {
        let v: Vec<f64> = per.iter().filter_map(|r| r.get(i).copied().flatten()).collect();
        stats::mean(&v)
    };
    Some(WeightSummary {
        overall: col(0),
        events: col(1),
        censored: col(2),
        by_survival_interval: (0..k).map(|i| col(3 + i)).collect(),
        by_risk_interval: (0..k).map(|i| col(3 + k + i)).collect(),
        datasets: replicates.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub confounding: Confounding,
    pub beta3: f64,
    pub gamma: f64,
    pub n_reps: usize,
    pub methods: Vec<OperatingCharacteristics>,
    pub weights: Option<WeightSummary>,
}

impl ScenarioResult {
    pub fn method(&self, m: Method) -> Option<&OperatingCharacteristics> {
        self.methods.iter().find(|o| o.method == m)
    }
}

/// Run every method on `n_reps` simulated datasets.
pub fn run_scenario(
    spec: &ScenarioSpec,
    methods: &[Method],
    n_reps: usize,
    seed_: u64,
    ctx: &AnalysisContext,
    weight_options: &WeightOptions,
) -> Result<ScenarioResult> {
    spec.validate()?;
    if n_reps == 0 {
        return Err(Error::Config("n_reps must be positive".into()));
    }
    let need_weights = methods.iter().any(Method::needs_weights);
    type RepOut = (Vec<Option<MethodOutcome>>, Option<(WeightMatrix, Vec<SubjectRecord>, TimePartition)>);
    let reps: Vec<Option<RepOut>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let s = replicate_seed(seed_, spec, rep);
            let mut r = match prepare_replicate(spec, s, need_weights.then_some(weight_options)) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}: replicate {rep} failed: {e}", spec.name);
                    return None;
                }
            };
            let outcomes = methods
                .iter()
                .map(|&m| match analyze(&mut r, m, ctx, s) {
                    Ok(o) => Some(o),
                    Err(e) => {
                        log::warn!("{}: replicate {rep}, {m} failed: {e}", spec.name);
                        None
                    }
                })
                .collect();
            let w = r.weights.map(|w| (w.matrix, r.subjects, r.partition));
            Some((outcomes, w))
        })
        .collect();

    let mut per_method: Vec<Vec<MethodOutcome>> = vec![Vec::new(); methods.len()];
    let mut weight_reps = Vec::new();
    for rep in reps.into_iter().flatten() {
        for (i, o) in rep.0.into_iter().enumerate() {
            if let Some(o) = o {
                per_method[i].push(o);
            }
        }
        if let Some(w) = rep.1 {
            weight_reps.push(w);
        }
    }
    let mut summaries = Vec::with_capacity(methods.len());
    for (m, outs) in methods.iter().zip(&per_method) {
        let n_failed = n_reps - outs.len();
        if n_failed * 100 > n_reps {
            return Err(Error::Harness(format!("{}: {m} failed on {n_failed} of {n_reps} replicates", spec.name)));
        }
        let n = outs.len() as f64;
        let rate = outs.iter().filter(|o| o.reject).count() as f64 / n;
        let sq: Vec<f64> = outs.iter().map(|o| (o.estimate - spec.gamma).powi(2)).collect();
        let rhats: Vec<f64> = outs.iter().filter_map(|o| o.rhat).collect();
        summaries.push(OperatingCharacteristics {
            method: *m,
            rejection_rate: rate,
            rejection_se: (rate * (1.0 - rate) / n).sqrt(),
            mse: stats::mean(&sq),
            mse_se: (stats::variance(&sq) / n).sqrt(),
            bias: outs.iter().map(|o| o.estimate - spec.gamma).sum::<f64>() / n,
            mean_ci_width: outs.iter().map(MethodOutcome::ci_width).sum::<f64>() / n,
            mean_a_bar: outs.iter().map(|o| o.a_bar).sum::<f64>() / n,
            mean_prob_nonnegative: outs.iter().map(|o| o.prob_nonnegative).sum::<f64>() / n,
            n_ok: outs.len(),
            n_failed,
            rhat_ok: (!rhats.is_empty())
                .then(|| rhats.iter().filter(|&&r| r <= 1.05).count() as f64 / rhats.len() as f64),
        });
    }
    Ok(ScenarioResult {
        scenario: spec.name.clone(),
        confounding: spec.confounding,
        beta3: spec.beta3,
        gamma: spec.gamma,
        n_reps,
        methods: summaries,
        weights: weight_summary(&weight_reps),
    })
}

/// One line of the long-format operating-characteristics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRow {
    pub scenario: String,
    pub method: String,
    pub beta3: f64,
    pub metric: String,
    pub value: f64,
    pub se: Option<f64>,
}

impl ScenarioResult {
    pub fn long_rows(&self) -> Vec<LongRow> {
        let mut rows = Vec::new();
        let mut push = |method: String, metric: &str, value: f64, se: Option<f64>| {
            rows.push(LongRow {
                scenario: self.scenario.clone(),
                method,
                beta3: self.beta3,
                metric: metric.into(),
                value,
                se,
            })
        };
        for o in &self.methods {
            let m = o.method.to_string();
            let label = if self.gamma == 0.0 { "type1" } else { "power" };
            push(m.clone(), label, o.rejection_rate, Some(o.rejection_se));
            push(m.clone(), "mse", o.mse, Some(o.mse_se));
            push(m.clone(), "bias", o.bias, None);
            push(m.clone(), "ci_width", o.mean_ci_width, None);
            push(m.clone(), "a_bar", o.mean_a_bar, None);
            push(m.clone(), "n_failed", o.n_failed as f64, None);
            if let Some(r) = o.rhat_ok {
                push(m, "rhat_ok", r, None);
            }
        }
        if let Some(w) = &self.weights {
            push("weights".into(), "a0", w.overall, None);
            push("weights".into(), "a0_evt", w.events, None);
            push("weights".into(), "a0_cen", w.censored, None);
            for (k, v) in w.by_survival_interval.iter().enumerate() {
                push("weights".into(), &format!("a0_int{}", k + 1), *v, None);
            }
            for (k, v) in w.by_risk_interval.iter().enumerate() {
                push("weights".into(), &format!("a_k{}", k + 1), *v, None);
            }
        }
        rows
    }
}
