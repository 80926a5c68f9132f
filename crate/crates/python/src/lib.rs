//! Python bindings: weight transforms, the Gaussian oracle, trial simulation
//! and the config-driven commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cwpp_core::calibration;
use cwpp_core::cli::{self, AnalysisConfig};
use cwpp_core::gaussian::{self, GaussianDesign, WeightPolicy};
use cwpp_core::sim::{generate_trial, Confounding, ScenarioSpec};
use cwpp_core::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// `f_p(a)`, shrinking a case weight towards one half.
#[pyfunction]
fn shrink(a: f64, p: u32) -> f64 {
    calibration::shrink(a, p)
}

/// `g_c(a_bar) = 1 / (1 + exp(-q (a_bar - c)))`.
#[pyfunction]
#[pyo3(signature = (a_bar, c, q = 50.0))]
fn discount(a_bar: f64, c: f64, q: f64) -> f64 {
    calibration::discount(a_bar, c, q)
}

/// Closed-form type-I error of the fixed-weight normal power prior.
#[pyfunction]
#[pyo3(signature = (a0, n1 = 100, n0 = 100, alpha = 0.025))]
fn analytic_type1(a0: f64, n1: usize, n0: usize, alpha: f64) -> f64 {
    gaussian::analytic_type1(n1, n0, a0, alpha)
}

/// Simulated type-I error of the normal power prior. `policy` is `"adaptive"`,
/// `"coin"` or a fixed weight such as `"0.5"`.
#[pyfunction]
#[pyo3(signature = (policy, n_reps, seed, n1 = 100, n0 = 100, sigma = std::f64::consts::SQRT_2, alpha = 0.025))]
#[allow(clippy::too_many_arguments)]
fn gaussian_oracle<'py>(
    py: Python<'py>,
    policy: &str,
    n_reps: usize,
    seed: u64,
    n1: usize,
    n0: usize,
    sigma: f64,
    alpha: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let policy = match policy {
        "adaptive" => WeightPolicy::Adaptive,
        "coin" => WeightPolicy::Coin,
        other => WeightPolicy::Fixed(
            other.parse().map_err(|_| PyValueError::new_err(format!("unknown policy {other:?}")))?,
        ),
    };
    let design = GaussianDesign { n1, n0, sigma, alpha };
    let s = py.detach(|| gaussian::gaussian_oracle(&design, policy, n_reps, seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("rejection_rate", s.rejection_rate)?;
    d.set_item("se", s.se)?;
    d.set_item("mean_posterior_mean", s.mean_posterior_mean)?;
    d.set_item("mean_posterior_sd", s.mean_posterior_sd)?;
    d.set_item("n_reps", s.n_reps)?;
    Ok(d)
}

/// Simulate one trial with the default design and write it in the input CSV schema.
#[pyfunction]
#[pyo3(signature = (path, seed, gamma = 0.0, beta3 = 0.0, confounding = "none"))]
fn write_trial_csv(path: PathBuf, seed: u64, gamma: f64, beta3: f64, confounding: &str) -> PyResult<usize> {
    let confounding = match confounding {
        "none" => Confounding::None,
        "partial_contamination" => Confounding::PartialContamination,
        "shift" => Confounding::Shift,
        "partial_shift" => Confounding::PartialShift,
        other => return Err(PyValueError::new_err(format!("unknown confounding {other:?}"))),
    };
    let spec = ScenarioSpec { gamma, beta3, confounding, ..Default::default() };
    let subjects = generate_trial(&spec, seed).map_err(to_py)?;
    cli::write_subjects(&path, &subjects).map_err(to_py)?;
    Ok(subjects.len())
}

/// Run `fit`, `weights`, `calibrate` or `simulate` from a config file and
/// return the command's JSON result (or the output directory for the others).
#[pyfunction]
#[pyo3(signature = (command, config, out, seed = None))]
fn run(py: Python<'_>, command: &str, config: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = AnalysisConfig::load(&config).map_err(to_py)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    py.detach(|| -> Result<String, Error> {
        match command {
            "fit" => cli::to_json(&cli::cmd_fit(&cfg, &out)?),
            "calibrate" => cli::to_json(&cli::cmd_calibrate(&cfg, &out)?),
            "weights" => cli::cmd_weights(&cfg, &out).map(|_| out.display().to_string()),
            "simulate" => cli::cmd_simulate(&cfg, &out).map(|_| out.display().to_string()),
            other => Err(Error::Config(format!("unknown command {other:?}"))),
        }
    })
    .map_err(to_py)
}

#[pymodule]
fn cwpp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", cli::VERSION)?;
    m.add_function(wrap_pyfunction!(shrink, m)?)?;
    m.add_function(wrap_pyfunction!(discount, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_type1, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(write_trial_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
