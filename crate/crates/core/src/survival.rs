//! Piecewise-exponential proportional-hazards data model.
//!
//! Time is measured in days and every rate is per day. Intervals are
//! left-open and right-closed: interval `k` (0-based) is
//! `(cutpoints[k], cutpoints[k + 1]]`, and the last interval is unbounded.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered cutpoints `0 = τ_0 < τ_1 < … < τ_{K-1}`; the final interval runs to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePartition {
    cutpoints: Vec<f64>,
}

impl TimePartition {
    pub fn new(cutpoints: Vec<f64>) -> Result<Self> {
        if cutpoints.is_empty() {
            return Err(Error::InvalidInput("partition needs at least one cutpoint".into()));
        }
        if cutpoints[0] != 0.0 {
            return Err(Error::InvalidInput(format!(
                "first cutpoint must be 0, got {}",
                cutpoints[0]
            )));
        }
        for w in cutpoints.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "cutpoints must be finite and strictly increasing: {:?}",
                    cutpoints
                )));
            }
        }
        Ok(Self { cutpoints })
    }

    /// The single-interval partition covering the whole time axis.
    pub fn single() -> Self {
        Self { cutpoints: vec![0.0] }
    }

    pub fn cutpoints(&self) -> &[f64] {
        &self.cutpoints
    }

    /// Number of intervals `K`.
    pub fn len(&self) -> usize {
        self.cutpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self, k: usize) -> f64 {
        self.cutpoints[k]
    }

    /// Right endpoint of interval `k` (infinite for the last interval).
    pub fn end(&self, k: usize) -> f64 {
        self.cutpoints.get(k + 1).copied().unwrap_or(f64::INFINITY)
    }

    pub fn width(&self, k: usize) -> f64 {
        self.end(k) - self.start(k)
    }

    /// Index of the interval containing `t > 0`.
    pub fn interval_of(&self, t: f64) -> usize {
        // number of cutpoints strictly below t, minus one
        self.cutpoints.partition_point(|&c| c < t).saturating_sub(1)
    }

    /// Refine this partition with extra cutpoints (duplicates and non-positive values ignored).
    pub fn refined(&self, extra: &[f64]) -> Self {
        let mut c = self.cutpoints.clone();
        c.extend(extra.iter().copied().filter(|x| *x > 0.0 && x.is_finite()));
        c.sort_by(|a, b| a.total_cmp(b));
        c.dedup();
        Self { cutpoints: c }
    }
}

/// Piecewise-constant hazard: one positive rate per interval of its partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseHazard {
    partition: TimePartition,
    rates: Vec<f64>,
}

impl PiecewiseHazard {
    pub fn new(partition: TimePartition, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != partition.len() {
            return Err(Error::Shape(format!(
                "{} rates for a {}-interval partition",
                rates.len(),
                partition.len()
            )));
        }
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidInput(format!("hazard rates must be positive, got {r}")));
        }
        Ok(Self { partition, rates })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(TimePartition::single(), vec![rate])
    }

    pub fn partition(&self) -> &TimePartition {
        &self.partition
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.rates[self.partition.interval_of(t)]
    }

    /// Multiply every rate by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.partition.clone(), self.rates.iter().map(|r| r * factor).collect())
    }

    /// Re-express the same hazard on a finer partition.
    pub fn on_partition(&self, finer: &TimePartition) -> Self {
        let rates = (0..finer.len())
            .map(|k| {
                let end = finer.end(k);
                let inside = if end.is_finite() { 0.5 * (finer.start(k) + end) } else { finer.start(k) + 1.0 };
                self.rate_at(inside)
            })
            .collect();
        Self { partition: finer.clone(), rates }
    }

    /// Apply `factor` to the hazard on `t > from` (the hazard is first refined at `from`).
    pub fn scaled_after(&self, from: f64, factor: f64) -> Result<Self> {
        let finer = self.partition.refined(&[from]);
        let base = self.on_partition(&finer);
        let rates = (0..finer.len())
            .map(|k| if finer.start(k) >= from { base.rates[k] * factor } else { base.rates[k] })
            .collect();
        Self::new(finer, rates)
    }

    /// Cumulative baseline hazard `Λ(t) = Σ_k λ_k H_k(t)`.
    pub fn cumulative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let kt = self.partition.interval_of(t);
        let mut acc = 0.0;
        for k in 0..kt {
            acc += self.rates[k] * self.partition.width(k);
        }
        acc + self.rates[kt] * (t - self.partition.start(kt))
    }

    /// Survival `S(t) = exp(-e^η Λ(t))` for linear predictor `η`.
    pub fn survival(&self, t: f64, eta: f64) -> f64 {
        (-eta.exp() * self.cumulative(t)).exp()
    }

    pub fn cdf(&self, t: f64, eta: f64) -> f64 {
        -(-eta.exp() * self.cumulative(t)).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Rct,
    External,
}

/// One subject: observation time, event flag, covariates, treatment and data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
    pub treated: bool,
    pub source: Source,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.time > 0.0) || !self.time.is_finite() {
            return Err(Error::InvalidInput(format!(
                "subject {}: time must be positive and finite, got {}",
                self.id, self.time
            )));
        }
        if self.treated && self.source == Source::External {
            return Err(Error::InvalidInput(format!(
                "subject {}: external controls cannot be treated",
                self.id
            )));
        }
        if self.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("subject {}: non-finite covariate", self.id)));
        }
        Ok(())
    }

    pub fn is_external(&self) -> bool {
        self.source == Source::External
    }

    pub fn is_rct_control(&self) -> bool {
        self.source == Source::Rct && !self.treated
    }
}

/// Per-interval at-risk exposures of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskDecomposition {
    /// 0-based index of the interval containing the observation time.
    pub terminal: usize,
    /// Days at risk in intervals `0..=terminal`.
    pub exposures: Vec<f64>,
    /// Whether the observation ends in an event.
    pub event: bool,
}

impl RiskDecomposition {
    pub fn total(&self) -> f64 {
        self.exposures.iter().sum()
    }

    pub fn terminal_exposure(&self) -> f64 {
        self.exposures[self.terminal]
    }
}

/// Split observation time `y` into per-interval exposures.
pub fn decompose(y: f64, event: bool, partition: &TimePartition) -> Result<RiskDecomposition> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::InvalidInput(format!("observation time must be positive, got {y}")));
    }
    let terminal = partition.interval_of(y);
    let mut exposures: Vec<f64> = (0..terminal).map(|k| partition.width(k)).collect();
    exposures.push(y - partition.start(terminal));
    Ok(RiskDecomposition { terminal, exposures, event })
}

/// Cutpoints placing (as evenly as integer counts allow) the same number of
/// observed events in each of `k` intervals.
///
/// Interior cutpoints sit midway between the last event of one block and the
/// first of the next. When tied times straddle a block boundary, the boundary
/// moves down to the largest event time strictly below the tied value.
pub fn build_partition(event_times: &[f64], k: usize) -> Result<TimePartition> {
    if k == 0 {
        return Err(Error::InvalidInput("interval count must be positive".into()));
    }
    let mut times: Vec<f64> = event_times.to_vec();
    if let Some(t) = times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput(format!("event times must be positive, got {t}")));
    }
    if times.len() < k {
        return Err(Error::InsufficientEvents { needed: k, found: times.len() });
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let n = times.len();
    let mut cutpoints = vec![0.0];
    for b in 1..k {
        // first index of block b under the balanced split
        let e = (b * n) / k;
        let (last, first) = (times[e - 1], times[e]);
        let cut = if last < first {
            0.5 * (last + first)
        } else {
            match times[..e].iter().rev().find(|&&t| t < first) {
                Some(&below) => below,
                None => return Err(Error::DegeneratePartition { block: b - 1, next: b }),
            }
        };
        if cut <= *cutpoints.last().unwrap() {
            return Err(Error::DegeneratePartition { block: b - 1, next: b });
        }
        cutpoints.push(cut);
    }
    TimePartition::new(cutpoints)
}

/// Event times of a dataset (observed events only).
pub fn event_times<'a>(subjects: impl IntoIterator<Item = &'a SubjectRecord>) -> Vec<f64> {
    subjects.into_iter().filter(|s| s.event).map(|s| s.time).collect()
}

/// `log λ_{k(t)} + x·β + zγ`.
pub fn log_hazard(t: f64, hazard: &PiecewiseHazard, x: &[f64], beta: &[f64], treated: bool, gamma: f64) -> f64 {
    let xb: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    hazard.rate_at(t).ln() + xb + if treated { gamma } else { 0.0 }
}

/// Draw from the piecewise-exponential law with hazard `λ_k e^η`, one interval
/// at a time using memorylessness.
pub fn sample_time<R: Rng + ?Sized>(hazard: &PiecewiseHazard, eta: f64, rng: &mut R) -> f64 {
    let scale = eta.exp();
    let p = hazard.partition();
    let last = p.len() - 1;
    for k in 0..=last {
        let e: f64 = rng.sample(Exp1);
        let t = p.start(k) + e / (hazard.rates[k] * scale);
        if k == last || t <= p.end(k) {
            return t;
        }
    }
    unreachable!("last interval is unbounded")
}

/// Draw `(y, ν)` with `y = min(event, censoring)` and `ν = 1` iff the event comes first.
/// `censoring = None` means no random censoring.
pub fn sample_observation<R: Rng + ?Sized>(
    event: (&PiecewiseHazard, f64),
    censoring: Option<(&PiecewiseHazard, f64)>,
    rng: &mut R,
) -> (f64, bool) {
    let t = sample_time(event.0, event.1, rng);
    match censoring {
        Some((h, eta)) => {
            let c = sample_time(h, eta, rng);
            if t <= c { (t, true) } else { (c, false) }
        }
        None => (t, true),
    }
}
