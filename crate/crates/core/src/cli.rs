//! Batch front end: configuration, CSV ingestion and report emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{
    average_weight, calibrate_c, calibrate_p, default_beta3_grid, default_c_grid, shrink, CalibrationDesign,
    CalibrationParams, GridPoint,
};
use crate::case_weights::{compute_all, WeightOptions, WeightResult};
use crate::commensurate::{CommensurateFit, McmcOptions};
use crate::error::{Error, Result};
use crate::inference::{bic, expand_rows, fit, FitOptions, RowOptions};
use crate::sim::{analyze, analyze_mcmc, method_weights, prepare_dataset, run_scenario, AnalysisContext, Confounding, Method};
use crate::sim::{ScenarioResult, ScenarioSpec};
use crate::survival::{build_partition, event_times, Source, SubjectRecord, TimePartition};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Input CSV header, in order.
pub const CSV_HEADER: [&str; 7] = ["id", "time", "event", "age", "sex", "treat", "source"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Number of intervals, with cutpoints at quantiles of the RCT event times.
    pub intervals: Option<usize>,
    pub cutpoints: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Output of `calibrate`; explicit fields below override it.
    pub file: Option<PathBuf>,
    pub p: Option<u32>,
    pub c: Option<f64>,
    pub q: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub n_replicates: usize,
    pub n_imputations: usize,
    pub censoring_covariates: bool,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = WeightOptions::default();
        Self { n_replicates: w.n_replicates, n_imputations: w.n_imputations, censoring_covariates: w.censoring_covariates }
    }
}

impl WeightsConfig {
    pub fn options(&self, seed: u64) -> WeightOptions {
        WeightOptions {
            n_replicates: self.n_replicates,
            n_imputations: self.n_imputations,
            seed,
            censoring_covariates: self.censoring_covariates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub sigma_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        let m = McmcOptions::default();
        Self { chains: m.chains, iterations: m.iterations, warmup: m.warmup, thin: m.thin, sigma_scale: m.sigma_scale }
    }
}

impl McmcConfig {
    pub fn options(&self, seed: u64) -> McmcOptions {
        McmcOptions {
            chains: self.chains,
            iterations: self.iterations,
            warmup: self.warmup,
            thin: self.thin,
            sigma_scale: self.sigma_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_reps: usize,
    pub methods: Vec<Method>,
    /// Applied to every scenario when present.
    pub beta3_grid: Option<Vec<f64>>,
    /// Default grid (three confounding kinds at both censoring levels) when empty.
    pub scenarios: Vec<ScenarioSpec>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { n_reps: 200, methods: vec![Method::NoBorrow], beta3_grid: None, scenarios: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Base design; confounding is set to none for `p` and to shift for `c`.
    pub design: ScenarioSpec,
    pub reps_p: usize,
    pub reps_c: usize,
    pub p_grid: Vec<u32>,
    pub c_grid: Vec<f64>,
    pub beta3_grid: Vec<f64>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            design: ScenarioSpec::default(),
            reps_p: 1000,
            reps_c: 500,
            p_grid: (1..=8).collect(),
            c_grid: default_c_grid(),
            beta3_grid: default_beta3_grid(),
        }
    }
}

/// Complete configuration shared by all commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub calibration: CalibrationConfig,
    pub weights: WeightsConfig,
    pub mcmc: McmcConfig,
    pub simulate: SimulateConfig,
    pub calibrate: CalibrateConfig,
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.data.input);
        rebase(&mut cfg.calibration.file);
        Ok(cfg)
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn require_method(&self) -> Result<Method> {
        self.method.ok_or_else(|| Error::Config("`method` is required".into()))
    }

    /// Calibration parameters from the calibration file and explicit overrides.
    pub fn calibration_params(&self) -> Result<CalibrationParams> {
        let mut params = match &self.calibration.file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let file: CalibrationReport =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                CalibrationParams { p: file.p, c: file.c, q: file.q, alpha: file.alpha, alpha_max: file.alpha_max }
            }
            None => CalibrationParams::default(),
        };
        let c = &self.calibration;
        if let Some(p) = c.p {
            params.p = p;
        }
        if let Some(v) = c.c {
            params.c = v;
        }
        if let Some(q) = c.q {
            params.q = q;
        }
        if let Some(a) = c.alpha {
            params.alpha = a;
        }
        if let Some(a) = c.alpha_max {
            params.alpha_max = a;
        }
        params.validate()?;
        Ok(params)
    }

    /// Check that the fields the method needs are present.
    pub fn check_method_fields(&self, method: Method) -> Result<()> {
        let has_file = self.calibration.file.is_some();
        let need_p = matches!(method, Method::Shrunk | Method::Discounted | Method::CwCommensurate);
        let need_c = matches!(method, Method::Discounted | Method::CwCommensurate);
        if need_p && !has_file && self.calibration.p.is_none() {
            return Err(Error::Config(format!("method {method} needs calibration.p or calibration.file")));
        }
        if need_c && !has_file && self.calibration.c.is_none() {
            return Err(Error::Config(format!("method {method} needs calibration.c or calibration.file")));
        }
        Ok(())
    }
}

/// `{:.16e}`: 17 significant digits, round-trip exact.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(fmt_num(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Pretty-free JSON with every float written to 17 significant digits.
pub fn to_json(value: &impl Serialize) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits);
    value.serialize(&mut ser).map_err(|e| Error::InvalidInput(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

fn parse_flag(s: &str, name: &str, row: usize) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse { row, message: format!("{name} must be 0 or 1, got {other:?}") }),
    }
}

fn parse_real(s: &str, name: &str, row: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse { row, message: format!("{name} is not a number: {s:?}") })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, message: format!("{name} must be finite") });
    }
    Ok(v)
}

/// Parse the trial CSV; `row` in errors is the 1-based line number.
pub fn parse_subjects(reader: impl std::io::Read) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { row: 1, message: e.to_string() })?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse { row: 1, message: format!("header must be {}", CSV_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse { row, message: format!("expected 7 fields, found {}", rec.len()) });
        }
        let time = parse_real(&rec[1], "time", row)?;
        if time <= 0.0 {
            return Err(Error::Parse { row, message: format!("time must be positive, got {time}") });
        }
        let source = match &rec[6] {
            "rct" => Source::Rct,
            "external" => Source::External,
            other => return Err(Error::Parse { row, message: format!("source must be rct or external, got {other:?}") }),
        };
        let treated = parse_flag(&rec[5], "treat", row)?;
        if treated && source == Source::External {
            return Err(Error::Parse { row, message: "treat must be 0 for external controls".into() });
        }
        let sex = parse_flag(&rec[4], "sex", row)?;
        out.push(SubjectRecord {
            id: rec[0].to_string(),
            time,
            event: parse_flag(&rec[2], "event", row)?,
            covariates: vec![parse_real(&rec[3], "age", row)?, if sex { 1.0 } else { 0.0 }],
            treated,
            source,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("input has no data rows".into()));
    }
    Ok(out)
}

pub fn read_subjects(path: &Path) -> Result<Vec<SubjectRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    parse_subjects(file)
}

/// Write subjects in the input schema (covariates must be `[age, male]`).
pub fn write_subjects(path: &Path, subjects: &[SubjectRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(CSV_HEADER).map_err(io)?;
    for s in subjects {
        if s.covariates.len() != 2 {
            return Err(Error::Shape(format!("subject {} needs covariates [age, sex]", s.id)));
        }
        let flag = |b: bool| if b { "1" } else { "0" };
        let source = match s.source {
            Source::Rct => "rct",
            Source::External => "external",
        };
        w.write_record([
            s.id.as_str(),
            &fmt_num(s.time),
            flag(s.event),
            &fmt_num(s.covariates[0]),
            flag(s.covariates[1] != 0.0),
            flag(s.treated),
            source,
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Analysis partition from the config: explicit cutpoints, or `K` intervals at RCT event quantiles.
pub fn partition_for(cfg: &PartitionConfig, subjects: &[SubjectRecord]) -> Result<TimePartition> {
    match (&cfg.cutpoints, cfg.intervals) {
        (Some(_), Some(_)) => Err(Error::Config("give either partition.cutpoints or partition.intervals".into())),
        (Some(c), None) => TimePartition::new(c.clone()),
        (None, Some(k)) => build_partition(&event_times(subjects.iter().filter(|s| s.source == Source::Rct)), k),
        (None, None) => Err(Error::Config("partition.intervals or partition.cutpoints is required".into())),
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))
}

/// The JSON report of `fit`.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_width: f64,
    /// Laplace methods only.
    pub bic: Option<f64>,
    pub a_bar: f64,
    pub reject: bool,
    pub n_events: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub method: Method,
    pub seed: Option<u64>,
    pub prob_nonnegative: f64,
    pub rhat: Option<f64>,
    pub version: String,
    pub config: AnalysisConfig,
}

fn write_weight_csv(path: &Path, weights: &WeightResult, params: &CalibrationParams, final_w: &crate::case_weights::WeightMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["j", "k", "a_raw", "a_shrunk", "a_final", "w_obs", "q05", "q50", "q95"]).map_err(io)?;
    for d in &weights.diagnostics {
        w.write_record([
            (d.j + 1).to_string(),
            (d.k + 1).to_string(),
            fmt_num(d.a_raw),
            fmt_num(shrink(d.a_raw, params.p)),
            fmt_num(final_w.rows()[d.j][d.k]),
            fmt_num(d.w_obs),
            fmt_num(d.q05),
            fmt_num(d.q50),
            fmt_num(d.q95),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Post-warmup commensurate draws: `chain,draw,gamma,delta,sigma`, both indices 1-based.
pub fn write_draws_csv(path: &Path, fit: &CommensurateFit) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["chain", "draw", "gamma", "delta", "sigma"]).map_err(io)?;
    let g = fit.gamma_index();
    for (c, chain) in fit.chains.iter().enumerate() {
        for (d, x) in chain.draws.chunks(chain.dim).enumerate() {
            let row = [
                (c + 1).to_string(),
                (d + 1).to_string(),
                fmt_num(x[g]),
                fmt_num(x[g + 1]),
                fmt_num(x[g + 2].exp()),
            ];
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Weight computation, transformation, fit and test on one dataset.
pub fn cmd_fit(cfg: &AnalysisConfig, out: &Path) -> Result<FitReport> {
    let method = cfg.require_method()?;
    cfg.check_method_fields(method)?;
    let params = cfg.calibration_params()?;
    let input = cfg.data.input.as_ref().ok_or_else(|| Error::Config("data.input is required".into()))?;
    let subjects = read_subjects(input)?;
    let partition = partition_for(&cfg.partition, &subjects)?;
    let stochastic = method.needs_weights() || matches!(method, Method::Commensurate);
    let seed = if stochastic { Some(cfg.require_seed()?) } else { cfg.seed };
    let seed_ = seed.unwrap_or(0);
    let weight_opts = method.needs_weights().then(|| cfg.weights.options(seed_));
    let n_events = subjects.iter().filter(|s| s.event).count();
    let k = partition.len();

    let mut rep = prepare_dataset(subjects, partition, seed_, weight_opts.as_ref())?;
    let ctx = AnalysisContext { params, mcmc: cfg.mcmc.options(seed_) };
    ensure_dir(out)?;
    let (outcome, bic_value) = match method {
        Method::Commensurate | Method::CwCommensurate => {
            let (o, draws) = analyze_mcmc(&rep, method, &ctx, seed_)?;
            write_draws_csv(&out.join("draws.csv"), &draws)?;
            (o, None)
        }
        _ => {
            let o = analyze(&mut rep, method, &ctx, seed_)?;
            let post = fit(&rep.data, &FitOptions::default())?;
            let unit = expand_rows(&rep.subjects, &rep.partition, None, RowOptions::default())?;
            (o, Some(bic(&post, &unit)?))
        }
    };
    if let Some(w) = &rep.weights {
        let final_w = method_weights(method, &w.matrix, &params)?;
        write_weight_csv(&out.join("weights.csv"), w, &params, &final_w)?;
    }
    let report = FitReport {
        hr: outcome.estimate.exp(),
        ci_low: outcome.ci_low,
        ci_high: outcome.ci_high,
        ci_width: outcome.ci_width(),
        bic: bic_value,
        a_bar: outcome.a_bar,
        reject: outcome.reject,
        n_events,
        k,
        method,
        seed,
        prob_nonnegative: outcome.prob_nonnegative,
        rhat: outcome.rhat,
        version: VERSION.into(),
        config: cfg.clone(),
    };
    fs::write(out.join("report.json"), to_json(&report)?)?;
    Ok(report)
}

/// Raw weights and diagnostics for one dataset.
pub fn cmd_weights(cfg: &AnalysisConfig, out: &Path) -> Result<WeightResult> {
    let seed = cfg.require_seed()?;
    let input = cfg.data.input.as_ref().ok_or_else(|| Error::Config("data.input is required".into()))?;
    let subjects = read_subjects(input)?;
    let partition = partition_for(&cfg.partition, &subjects)?;
    let params = cfg.calibration_params()?;
    let result = compute_all(&subjects, &partition, &cfg.weights.options(seed))?;
    let final_w = match cfg.method {
        Some(m) if m.needs_weights() => method_weights(m, &result.matrix, &params)?,
        _ => result.matrix.map(|a| shrink(a, params.p))?,
    };
    ensure_dir(out)?;
    write_weight_csv(&out.join("weights.csv"), &result, &params, &final_w)?;
    let summary = serde_json::json!({
        "a_bar": average_weight(&result.matrix)?,
        "n_controls": result.matrix.len(),
        "n_entries": result.matrix.n_entries(),
        "K": partition.len(),
        "cutpoints": partition.cutpoints(),
        "seed": seed,
        "version": VERSION,
    });
    fs::write(out.join("weights_summary.json"), to_json(&summary)?)?;
    Ok(result)
}

/// The JSON file written by `calibrate` and read back through `calibration.file`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub p: u32,
    pub c: f64,
    pub q: f64,
    pub alpha: f64,
    pub alpha_max: f64,
    #[serde(default)]
    pub rates_by_grid_point: Vec<GridPointRecord>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPointRecord {
    pub stage: String,
    pub p: u32,
    pub c: f64,
    pub beta3: f64,
    pub rate: f64,
    pub se: f64,
    pub n: usize,
}

impl GridPointRecord {
    fn from(stage: &str, g: &GridPoint) -> Self {
        Self { stage: stage.into(), p: g.p, c: g.c, beta3: g.beta3, rate: g.rate, se: g.se, n: g.n }
    }
}

/// Calibrate `p` on a compatible null design, then `c` on a shift design.
pub fn cmd_calibrate(cfg: &AnalysisConfig, out: &Path) -> Result<CalibrationReport> {
    let seed = cfg.require_seed()?;
    let base = cfg.calibration_params()?;
    let cal = &cfg.calibrate;
    let weights = cfg.weights.options(0);
    let null = ScenarioSpec {
        name: format!("{}-compatible", cal.design.name),
        confounding: Confounding::None,
        gamma: 0.0,
        beta3: 0.0,
        ..cal.design.clone()
    };
    let design_p = CalibrationDesign { spec: null, reps: cal.reps_p, seed, weights: weights.clone() };
    let (p, p_points) = calibrate_p(&design_p, base.alpha, &cal.p_grid)?;
    let shift =
        ScenarioSpec { name: format!("{}-shift", cal.design.name), confounding: Confounding::Shift, gamma: 0.0, ..cal.design.clone() };
    let design_c = CalibrationDesign { spec: shift, reps: cal.reps_c, seed, weights };
    let (c, c_points) = calibrate_c(&design_c, &CalibrationParams { p, ..base }, &cal.c_grid, &cal.beta3_grid)?;
    let mut rates: Vec<GridPointRecord> = p_points.iter().map(|g| GridPointRecord::from("p", g)).collect();
    rates.extend(c_points.iter().map(|g| GridPointRecord::from("c", g)));
    let report = CalibrationReport { p, c, q: base.q, alpha: base.alpha, alpha_max: base.alpha_max, rates_by_grid_point: rates, seed };
    ensure_dir(out)?;
    fs::write(out.join("calibration.json"), to_json(&report)?)?;
    Ok(report)
}

/// Default scenario grid: three confounding kinds, low (1.4) and high (0.9) censoring.
pub fn default_scenarios() -> Vec<ScenarioSpec> {
    let mut out = Vec::new();
    for (label, mult) in [("low", 1.4), ("high", 0.9)] {
        for kind in [Confounding::PartialContamination, Confounding::Shift, Confounding::PartialShift] {
            out.push(ScenarioSpec {
                name: format!("{kind}-{label}"),
                confounding: kind,
                censoring_multiplier: mult,
                ..Default::default()
            });
        }
    }
    out
}

/// Default beta_3 grid `0, ±log(3)/2, ±log 3`.
pub fn default_table_grid() -> Vec<f64> {
    let l = 3f64.ln();
    vec![-l, -l / 2.0, 0.0, l / 2.0, l]
}

/// Operating characteristics over scenarios and beta_3 values.
pub fn cmd_simulate(cfg: &AnalysisConfig, out: &Path) -> Result<Vec<ScenarioResult>> {
    let seed = cfg.require_seed()?;
    let sim = &cfg.simulate;
    if sim.methods.is_empty() {
        return Err(Error::Config("simulate.methods is empty".into()));
    }
    for &m in &sim.methods {
        cfg.check_method_fields(m)?;
    }
    let params = cfg.calibration_params()?;
    let ctx = AnalysisContext { params, mcmc: cfg.mcmc.options(0) };
    let weights = cfg.weights.options(0);
    let scenarios = if sim.scenarios.is_empty() { default_scenarios() } else { sim.scenarios.clone() };
    let grid = match (&sim.beta3_grid, sim.scenarios.is_empty()) {
        (Some(g), _) => Some(g.clone()),
        (None, true) => Some(default_table_grid()),
        (None, false) => None,
    };
    let mut results = Vec::new();
    for spec in &scenarios {
        let specs: Vec<ScenarioSpec> = match &grid {
            Some(g) => g.iter().map(|&b| ScenarioSpec { beta3: b, ..spec.clone() }).collect(),
            None => vec![spec.clone()],
        };
        for s in specs {
            log::info!("scenario {} beta3 = {}", s.name, s.beta3);
            results.push(run_scenario(&s, &sim.methods, sim.n_reps, seed, &ctx, &weights)?);
        }
    }
    ensure_dir(out)?;
    write_long_csv(&out.join("oc_long.csv"), &results)?;
    write_weight_summary_csv(&out.join("weight_summary.csv"), &results)?;
    Ok(results)
}

fn write_long_csv(path: &Path, results: &[ScenarioResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["scenario", "method", "beta3", "metric", "value", "se"]).map_err(io)?;
    for r in results {
        for row in r.long_rows() {
            w.write_record([
                row.scenario,
                row.method,
                fmt_num(row.beta3),
                row.metric,
                fmt_num(row.value),
                row.se.map(fmt_num).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_weight_summary_csv(path: &Path, results: &[ScenarioResult]) -> Result<()> {
    let with_weights: Vec<&ScenarioResult> = results.iter().filter(|r| r.weights.is_some()).collect();
    if with_weights.is_empty() {
        return Ok(());
    }
    let k = with_weights.iter().map(|r| r.weights.as_ref().map_or(0, |w| w.by_survival_interval.len())).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    let mut header: Vec<String> =
        ["scenario", "confounding", "beta3", "a0", "a0_evt", "a0_cen"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=k).map(|i| format!("a0_int{i}")));
    header.extend((1..=k).map(|i| format!("a_k{i}")));
    w.write_record(&header).map_err(io)?;
    for r in with_weights {
        let s = r.weights.as_ref().expect("filtered");
        let mut row = vec![r.scenario.clone(), r.confounding.to_string(), fmt_num(r.beta3), fmt_num(s.overall), fmt_num(s.events), fmt_num(s.censored)];
        row.extend((0..k).map(|i| s.by_survival_interval.get(i).map(|&v| fmt_num(v)).unwrap_or_default()));
        row.extend((0..k).map(|i| s.by_risk_interval.get(i).map(|&v| fmt_num(v)).unwrap_or_default()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
