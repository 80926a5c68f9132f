use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cwpp_core::cli::{cmd_calibrate, cmd_fit, cmd_simulate, cmd_weights, to_json, AnalysisConfig};
use cwpp_core::Error;

#[derive(Parser)]
#[command(name = "cwpp", version, about = "Case-weighted adaptive power priors for external controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one dataset with the configured method and write report.json.
    Fit(Common),
    /// Compute case weights and per-entry diagnostics for one dataset.
    Weights(Common),
    /// Calibrate the shrinkage power p and the discount c by simulation.
    Calibrate(Common),
    /// Run the operating-characteristics simulation grid.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<(), Error> {
    let common = match &cli.command {
        Command::Fit(c) | Command::Weights(c) | Command::Calibrate(c) | Command::Simulate(c) => c,
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = AnalysisConfig::load(&common.config)?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    let out = &common.out;
    match cli.command {
        Command::Fit(_) => {
            let r = cmd_fit(&cfg, out)?;
            print!("{}", to_json(&r)?);
        }
        Command::Weights(_) => {
            let r = cmd_weights(&cfg, out)?;
            log::info!("{} weights written to {}", r.diagnostics.len(), out.display());
        }
        Command::Calibrate(_) => {
            let r = cmd_calibrate(&cfg, out)?;
            println!("p = {}, c = {}", r.p, r.c);
        }
        Command::Simulate(_) => {
            let r = cmd_simulate(&cfg, out)?;
            log::info!("{} scenario points written to {}", r.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
