//! Shrinkage and uniform discounting of raw weights, and their calibration by
//! simulation under a fixed design.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case_weights::WeightMatrix;
use crate::error::{Error, Result};
use crate::inference::{fit, marginal_treatment, test_superiority, FitOptions};
use crate::sim::{prepare_replicate, replicate_seed, Confounding, ScenarioSpec};

/// `f_p(a) = (sgn(a − ½)|2(a − ½)|^p + 1) / 2`.
pub fn shrink(a: f64, p: u32) -> f64 {
    if p == 1 {
        return a;
    }
    let d = 2.0 * (a - 0.5);
    0.5 * (d.signum() * d.abs().powi(p as i32) + 1.0)
}

/// `g_c(Ā) = 1 / (1 + exp(−q(Ā − c)))`.
pub fn discount(a_bar: f64, c: f64, q: f64) -> f64 {
    1.0 / (1.0 + (-q * (a_bar - c)).exp())
}

/// Mean over all entries (controls at risk in more intervals count more).
pub fn average_weight(a: &WeightMatrix) -> Result<f64> {
    let n = a.n_entries();
    if n == 0 {
        return Err(Error::InvalidInput("empty weight matrix".into()));
    }
    Ok(a.entries().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationParams {
    pub p: u32,
    pub c: f64,
    pub q: f64,
    pub alpha: f64,
    pub alpha_max: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self { p: 1, c: 0.0, q: 50.0, alpha: 0.025, alpha_max: 0.15 }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::Config("p must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.c) {
            return Err(Error::Config(format!("c must lie in [0, 0.5), got {}", self.c)));
        }
        if !(self.q > 0.0) {
            return Err(Error::Config("q must be positive".into()));
        }
        if !(0.0 < self.alpha && self.alpha < self.alpha_max && self.alpha_max <= 1.0) {
            return Err(Error::Config("need 0 < alpha < alpha_max <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    Shrunk,
    Discounted,
}

/// Entrywise `f_p`, times `g_c(Ā)` (Ā from the raw weights) in discounted mode.
pub fn transform(a: &WeightMatrix, params: &CalibrationParams, mode: TransformMode) -> Result<WeightMatrix> {
    let g = match mode {
        TransformMode::Shrunk => 1.0,
        TransformMode::Discounted => discount(average_weight(a)?, params.c, params.q),
    };
    a.map(|x| (shrink(x, params.p) * g).clamp(0.0, 1.0))
}

/// Simulated rejection rate at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub p: u32,
    pub c: f64,
    pub beta3: f64,
    pub rate: f64,
    pub se: f64,
    pub n: usize,
}

/// Settings shared by both calibration searches.
#[derive(Debug, Clone)]
pub struct CalibrationDesign {
    pub spec: ScenarioSpec,
    pub reps: usize,
    pub seed: u64,
    pub weights: crate::case_weights::WeightOptions,
}

/// `sqrt(α(1 − α)/n)`, the binomial standard error at the nominal rate.
pub fn nominal_se(alpha: f64, n: usize) -> f64 {
    (alpha * (1.0 - alpha) / n as f64).sqrt()
}

fn rejections_by_transform(
    design: &CalibrationDesign,
    spec: &ScenarioSpec,
    transforms: &[CalibrationParams],
    mode: TransformMode,
) -> Result<Vec<(usize, usize)>> {
    let per_rep: Vec<Option<Vec<bool>>> = (0..design.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = replicate_seed(design.seed, spec, rep);
            let mut r = match prepare_replicate(spec, seed, Some(&design.weights)) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("calibration replicate {rep} failed: {e}");
                    return None;
                }
            };
            let raw = r.weights.as_ref().expect("weights requested").matrix.clone();
            let mut out = Vec::with_capacity(transforms.len());
            for t in transforms {
                let w = transform(&raw, t, mode).ok()?;
                r.data.set_external_weights(&w).ok()?;
                match fit(&r.data, &FitOptions::default()).and_then(|post| marginal_treatment(&post)) {
                    Ok(eff) => out.push(test_superiority(&eff, t.alpha)),
                    Err(e) => {
                        log::warn!("calibration replicate {rep} fit failed: {e}");
                        return None;
                    }
                }
            }
            Some(out)
        })
        .collect();
    let ok: Vec<&Vec<bool>> = per_rep.iter().flatten().collect();
    let failed = design.reps - ok.len();
    if failed * 100 > design.reps {
        return Err(Error::Harness(format!("{failed} of {} calibration replicates failed", design.reps)));
    }
    Ok((0..transforms.len()).map(|i| (ok.iter().filter(|r| r[i]).count(), ok.len())).collect())
}

/// Choose `p` whose type-I rate under compatible data is closest to `alpha`.
///
/// Among grid values with rate at most `alpha + SE`, the smallest `p` whose
/// distance to `alpha` is within one SE of the best distance is returned.
pub fn calibrate_p(design: &CalibrationDesign, alpha: f64, grid: &[u32]) -> Result<(u32, Vec<GridPoint>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty p grid".into()));
    }
    if design.spec.gamma != 0.0 || design.spec.confounding != Confounding::None {
        return Err(Error::Config("p calibration needs a null design with compatible external controls".into()));
    }
    let transforms: Vec<CalibrationParams> =
        grid.iter().map(|&p| CalibrationParams { p, alpha, ..Default::default() }).collect();
    let counts = rejections_by_transform(design, &design.spec, &transforms, TransformMode::Shrunk)?;
    let points: Vec<GridPoint> = grid
        .iter()
        .zip(&counts)
        .map(|(&p, &(r, n))| {
            let rate = r as f64 / n as f64;
            GridPoint { p, c: 0.0, beta3: design.spec.beta3, rate, se: (rate * (1.0 - rate) / n as f64).sqrt(), n }
        })
        .collect();
    let se = nominal_se(alpha, points[0].n);
    let choose = |bound: f64| -> Option<u32> {
        let admissible: Vec<&GridPoint> = points.iter().filter(|g| g.rate <= alpha + bound).collect();
        let best = admissible.iter().map(|g| (g.rate - alpha).abs()).fold(f64::INFINITY, f64::min);
        admissible.iter().filter(|g| (g.rate - alpha).abs() <= best + se).map(|g| g.p).min()
    };
    let p = choose(se).or_else(|| choose(2.0 * se)).ok_or_else(|| {
        Error::CalibrationFailure(format!("no p in {grid:?} gives a type-I rate within alpha + 2 SE"))
    })?;
    Ok((p, points))
}

/// Default c grid `0.05, 0.10, …, 0.45`.
pub fn default_c_grid() -> Vec<f64> {
    (1..=9).map(|i| 0.05 * i as f64).collect()
}

/// Default shift grid `±log 3, ±log 2, ±log 1.5, 0`.
pub fn default_beta3_grid() -> Vec<f64> {
    let l = [3f64.ln(), 2f64.ln(), 1.5f64.ln()];
    vec![-l[0], -l[1], -l[2], 0.0, l[2], l[1], l[0]]
}

/// Choose the discount location `c`.
///
/// For each `c` the maximum type-I rate over the shift grid is simulated. The
/// returned value is the least-discounting `c` (smallest, since `g_c` falls as
/// `c` grows) whose maximum rate is below `alpha_max`, refined once at the
/// midpoint towards its infeasible neighbour.
pub fn calibrate_c(
    design: &CalibrationDesign,
    params: &CalibrationParams,
    c_grid: &[f64],
    beta3_grid: &[f64],
) -> Result<(f64, Vec<GridPoint>)> {
    if c_grid.is_empty() || beta3_grid.is_empty() {
        return Err(Error::Config("empty c or beta3 grid".into()));
    }
    if design.spec.gamma != 0.0 || design.spec.confounding != Confounding::Shift {
        return Err(Error::Config("c calibration needs a null design with shift confounding".into()));
    }
    let mut grid: Vec<f64> = c_grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    let mut candidates = grid.clone();
    candidates.extend(grid.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.sort_by(|a, b| a.total_cmp(b));
    let transforms: Vec<CalibrationParams> =
        candidates.iter().map(|&c| CalibrationParams { c, ..*params }).collect();

    let mut points = Vec::new();
    let mut max_rate = vec![0.0f64; candidates.len()];
    for &b3 in beta3_grid {
        let spec = ScenarioSpec { beta3: b3, ..design.spec.clone() };
        let counts = rejections_by_transform(design, &spec, &transforms, TransformMode::Discounted)?;
        for (i, &(r, n)) in counts.iter().enumerate() {
            let rate = r as f64 / n as f64;
            max_rate[i] = max_rate[i].max(rate);
            points.push(GridPoint {
                p: params.p,
                c: candidates[i],
                beta3: b3,
                rate,
                se: (rate * (1.0 - rate) / n as f64).sqrt(),
                n,
            });
        }
    }
    let rate_at = |c: f64| max_rate[candidates.iter().position(|&x| x == c).expect("candidate")];
    let feasible = |c: f64| rate_at(c) < params.alpha_max;
    let i = grid.iter().position(|&c| feasible(c)).ok_or_else(|| {
        Error::CalibrationFailure(format!("no c in {grid:?} keeps the shift type-I rate below {}", params.alpha_max))
    })?;
    let mut c = grid[i];
    if i > 0 {
        let mid = 0.5 * (grid[i - 1] + grid[i]);
        if feasible(mid) {
            c = mid;
        }
    }
    Ok((c, points))
}
