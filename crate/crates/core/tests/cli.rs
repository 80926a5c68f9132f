use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cwpp_core::cli::{cmd_calibrate, cmd_fit, cmd_simulate, cmd_weights, write_subjects, AnalysisConfig};
use cwpp_core::sim::{generate_trial, ScenarioSpec};
use cwpp_core::survival::{Source, SubjectRecord};
use cwpp_core::Error;

fn trial(spec: &ScenarioSpec, seed: u64) -> Vec<SubjectRecord> {
    generate_trial(spec, seed).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

fn load(dir: &Path, body: &str) -> AnalysisConfig {
    AnalysisConfig::load(&write_config(dir, body)).unwrap()
}

#[test]
fn fit_recovers_effect_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let gamma = 0.73f64.ln();
    let spec = ScenarioSpec { n_treat: 1500, n_rct_control: 1500, gamma, ..Default::default() };
    write_subjects(&dir.path().join("data.csv"), &trial(&spec, 11)).unwrap();
    let cfg = load(
        dir.path(),
        "method = \"no_borrow\"\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n",
    );
    let a = cmd_fit(&cfg, &dir.path().join("a")).unwrap();
    assert!((a.hr.ln() - gamma).abs() < 0.15, "hr {}", a.hr);
    assert!(a.ci_low < a.hr && a.hr < a.ci_high);
    assert!(a.reject);
    assert_eq!(a.k, 2);
    assert_eq!(a.a_bar, 0.0);
    assert!(a.bic.is_some());
    cmd_fit(&cfg, &dir.path().join("b")).unwrap();
    let ja = fs::read(dir.path().join("a/report.json")).unwrap();
    assert_eq!(ja, fs::read(dir.path().join("b/report.json")).unwrap());
    let text = String::from_utf8(ja).unwrap();
    for key in ["\"hr\"", "\"ci_low\"", "\"ci_high\"", "\"ci_width\"", "\"bic\"", "\"a_bar\"", "\"reject\"", "\"n_events\"", "\"K\"", "\"method\"", "\"seed\"", "\"version\""] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn shrunk_fit_uses_calibration_file() {
    let dir = tempfile::tempdir().unwrap();
    write_subjects(&dir.path().join("data.csv"), &trial(&ScenarioSpec::default(), 5)).unwrap();
    fs::write(
        dir.path().join("cal.json"),
        r#"{"p": 3, "c": 0.2, "q": 50.0, "alpha": 0.025, "alpha_max": 0.15}"#,
    )
    .unwrap();
    let body = "seed = 9\nmethod = \"shrunk\"\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n\
                [calibration]\nfile = \"cal.json\"\n[weights]\nn_replicates = 2000\nn_imputations = 5\n";
    let cfg = load(dir.path(), body);
    assert_eq!(cfg.calibration_params().unwrap().p, 3);
    let out = dir.path().join("out");
    let r = cmd_fit(&cfg, &out).unwrap();
    assert!(r.a_bar > 0.3 && r.a_bar < 0.7, "{}", r.a_bar);

    let csv = fs::read_to_string(out.join("weights.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "j,k,a_raw,a_shrunk,a_final,w_obs,q05,q50,q95");
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let (raw, shrunk, fin) = (f[2], f[3], f[4]);
        assert!((0.0..=1.0).contains(&raw));
        assert!((shrunk - 0.5).abs() <= (raw - 0.5).abs() + 1e-15);
        assert_eq!(shrunk, fin);
        assert!(f[6] <= f[7] && f[7] <= f[8]);
    }
}

#[test]
fn missing_method_fields_and_seed_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_subjects(&dir.path().join("data.csv"), &trial(&ScenarioSpec::default(), 5)).unwrap();
    let cfg = load(dir.path(), "seed = 1\nmethod = \"discounted\"\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n[calibration]\np = 2\n");
    assert!(matches!(cmd_fit(&cfg, &dir.path().join("o")), Err(Error::Config(_))));
    let cfg = load(dir.path(), "method = \"untransformed\"\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n");
    assert!(matches!(cmd_fit(&cfg, &dir.path().join("o")), Err(Error::Config(_))));
    let cfg = load(dir.path(), "seed = 1\nmethod = \"pool\"\n[data]\ninput = \"data.csv\"\n");
    assert!(matches!(cmd_fit(&cfg, &dir.path().join("o")), Err(Error::Config(_))));
}

#[test]
fn incompatible_control_gets_small_terminal_weight() {
    let dir = tempfile::tempdir().unwrap();
    let mut subjects = trial(&ScenarioSpec::default(), 21);
    let target = subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.source == Source::External)
        .max_by(|a, b| a.1.time.total_cmp(&b.1.time))
        .map(|(i, _)| i)
        .unwrap();
    let j = subjects[..target].iter().filter(|s| s.is_external()).count();
    subjects[target].time *= 8.0;
    write_subjects(&dir.path().join("data.csv"), &subjects).unwrap();
    let cfg = load(
        dir.path(),
        "seed = 3\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n[weights]\nn_replicates = 4000\n",
    );
    let out = dir.path().join("w");
    let result = cmd_weights(&cfg, &out).unwrap();
    let row = &result.matrix.rows()[j];
    let terminal = *row.last().unwrap();
    assert!(terminal < 0.05, "terminal weight {terminal}");
    let mean = result.matrix.entries().sum::<f64>() / result.matrix.n_entries() as f64;
    assert!(mean > 0.35 && mean < 0.65, "{mean}");
    assert!(out.join("weights_summary.json").exists());
}

#[test]
fn empty_external_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let subjects: Vec<SubjectRecord> =
        trial(&ScenarioSpec::default(), 2).into_iter().filter(|s| s.source == Source::Rct).collect();
    write_subjects(&dir.path().join("data.csv"), &subjects).unwrap();
    let cfg = load(dir.path(), "seed = 3\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n");
    let err = cmd_weights(&cfg, &dir.path().join("w")).unwrap_err();
    assert!(matches!(err, Error::EmptyExternal));
    assert_eq!(err.exit_code(), 2);
}

const SIM_BODY: &str = "seed = 17\n[simulate]\nn_reps = 40\nmethods = [\"no_borrow\", \"pool\", \"fixed:0.5\"]\nbeta3_grid = [0.0, 1.0986122886681098]\n\
    [[simulate.scenarios]]\nname = \"shift\"\nconfounding = \"shift\"\n";

#[test]
fn simulate_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), SIM_BODY);
    let run = |threads: usize, out: &str| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cmd_simulate(&cfg, &dir.path().join(out)).unwrap());
        fs::read(dir.path().join(out).join("oc_long.csv")).unwrap()
    };
    let one = run(1, "t1");
    let many = run(8, "t8");
    assert_eq!(one, many);
    let text = String::from_utf8(one).unwrap();
    assert!(text.starts_with("scenario,method,beta3,metric,value,se\n"));
    assert!(text.contains("shift,pool,"));
    assert!(!dir.path().join("t1/weight_summary.csv").exists());
}

#[test]
fn calibrate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let body = "seed = 5\n[calibration]\nalpha_max = 0.5\n[weights]\nn_replicates = 1000\nn_imputations = 4\n\
                [calibrate]\nreps_p = 30\nreps_c = 20\np_grid = [1, 2]\nc_grid = [0.1, 0.3]\nbeta3_grid = [0.0, 1.0]\n\
                [calibrate.design]\nn_external = 40\n";
    let cfg = load(dir.path(), body);
    let a = cmd_calibrate(&cfg, &dir.path().join("a")).unwrap();
    cmd_calibrate(&cfg, &dir.path().join("b")).unwrap();
    let fa = fs::read(dir.path().join("a/calibration.json")).unwrap();
    assert_eq!(fa, fs::read(dir.path().join("b/calibration.json")).unwrap());
    assert!(a.p == 1 || a.p == 2);
    assert!(a.rates_by_grid_point.iter().any(|g| g.stage == "c"));
    let cfg2 = load(dir.path(), "[calibration]\nfile = \"a/calibration.json\"\n");
    let params = cfg2.calibration_params().unwrap();
    assert_eq!((params.p, params.c), (a.p, a.c));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cwpp"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_subjects(&dir.path().join("data.csv"), &trial(&ScenarioSpec::default(), 8)).unwrap();
    let good = write_config(dir.path(), "method = \"pool\"\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 1\n");
    let out = bin().args(["fit", "--config"]).arg(&good).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("\"method\":\"pool\""));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "methd = \"pool\"\n").unwrap();
    let out = bin().args(["fit", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("broken.csv"), "id,time,event,age,sex,treat,source\na,1,1,60,1,0,rct\nb,x,1,60,1,0,rct\n").unwrap();
    let cfg = dir.path().join("broken.toml");
    fs::write(&cfg, "method = \"pool\"\n[data]\ninput = \"broken.csv\"\n[partition]\nintervals = 1\n").unwrap();
    let out = bin().args(["fit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));

    let sim = write_config(dir.path(), SIM_BODY);
    let out = bin()
        .args(["simulate", "--threads", "2", "--seed", "17", "--config"])
        .arg(&sim)
        .arg("--out")
        .arg(dir.path().join("s"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("s/oc_long.csv").exists());
}

#[test]
fn commensurate_fit_exports_draws() {
    let dir = tempfile::tempdir().unwrap();
    write_subjects(&dir.path().join("data.csv"), &trial(&ScenarioSpec::default(), 21)).unwrap();
    let body = "seed = 4\nmethod = \"commensurate\"\n[data]\ninput = \"data.csv\"\n[partition]\nintervals = 2\n\
                [mcmc]\nchains = 2\niterations = 2000\nwarmup = 500\n";
    let cfg = load(dir.path(), body);
    let out = dir.path().join("out");
    let r = cmd_fit(&cfg, &out).unwrap();
    assert!(r.bic.is_none());
    assert!(r.rhat.is_some());
    let csv = fs::read_to_string(out.join("draws.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "chain,draw,gamma,delta,sigma");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2 * 1500);
    assert!(rows.iter().all(|f| f[4] > 0.0));
    let mean_gamma = rows.iter().map(|f| f[2]).sum::<f64>() / rows.len() as f64;
    assert!((mean_gamma - r.hr.ln()).abs() < 1e-12);
}
