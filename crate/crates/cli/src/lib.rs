//! Command-line front end: `estimate`, `simulate`, `bench`, `efficiency`
//! and `validate`. Settings come from an optional JSON config; flags
//! override individual keys.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipsi_core::estimator::EstimatorKind;

use config::{load, BenchConfig, EfficiencyConfig, EstimateConfig, GridSpec, SimulateConfig, ValidateConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ipsi", version, about = "Incremental propensity score intervention effects")]
pub struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the effect curve and confidence bands from a panel CSV.
    Estimate(EstimateArgs),
    /// Draw a synthetic panel.
    Simulate(SimulateArgs),
    /// Run the simulation benchmark.
    Bench(BenchArgs),
    /// Analytic efficiency bounds for the randomized design.
    Efficiency(EfficiencyArgs),
    /// Check a panel CSV for format and monotone dropout.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `0.5,1,2` or `log:0.1:5:25`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<EstimatorKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dropout`, `trial` or `observational`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub ul: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub ul: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub truth_draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EfficiencyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub tmax: Option<usize>,
    /// `always_treated` or `never_treated`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown estimator '{s}' (cross_fit, plugin, ipw, no_censoring)")
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn grid_flag(slot: &mut GridSpec, value: Option<String>) -> Result<(), CliError> {
    if let Some(s) = value {
        *slot = GridSpec::parse(&s)?;
    }
    Ok(())
}

fn print_outputs(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn dispatch(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Estimate(a) => {
            let mut cfg: EstimateConfig = load(a.config.as_deref())?;
            set_opt(&mut cfg.input, a.input);
            set_opt(&mut cfg.out_dir, a.out_dir);
            set_opt(&mut cfg.t, a.t);
            set(&mut cfg.folds, a.folds);
            set_opt(&mut cfg.seed, a.seed);
            grid_flag(&mut cfg.grid, a.grid)?;
            set(&mut cfg.estimator, a.estimator);
            set(&mut cfg.alpha, a.alpha);
            set(&mut cfg.bootstrap, a.bootstrap);
            print_outputs(&commands::estimate(&cfg)?);
        }
        Command::Simulate(a) => {
            let mut cfg: SimulateConfig = load(a.config.as_deref())?;
            set(&mut cfg.dgp.kind, a.kind);
            set(&mut cfg.dgp.u_l, a.ul);
            set(&mut cfg.dgp.p, a.p);
            set(&mut cfg.dgp.n, a.n);
            set(&mut cfg.dgp.horizon, a.t);
            set_opt(&mut cfg.seed, a.seed);
            set_opt(&mut cfg.out, a.out);
            print_outputs(&commands::simulate_panel(&cfg)?);
        }
        Command::Bench(a) => {
            let mut cfg: BenchConfig = load(a.config.as_deref())?;
            set(&mut cfg.dgp.kind, a.kind);
            set(&mut cfg.dgp.u_l, a.ul);
            set(&mut cfg.dgp.n, a.n);
            set(&mut cfg.dgp.horizon, a.t);
            set(&mut cfg.replications, a.replications);
            grid_flag(&mut cfg.grid, a.grid)?;
            set(&mut cfg.folds, a.folds);
            set(&mut cfg.truth_draws, a.truth_draws);
            set_opt(&mut cfg.seed, a.seed);
            set_opt(&mut cfg.out_dir, a.out_dir);
            print_outputs(&commands::bench(&cfg)?);
        }
        Command::Efficiency(a) => {
            let mut cfg: EfficiencyConfig = load(a.config.as_deref())?;
            set(&mut cfg.delta, a.delta);
            set(&mut cfg.p, a.p);
            set(&mut cfg.tmax, a.tmax);
            if let Some(v) = a.variant {
                cfg.variant = serde_json::from_value(serde_json::Value::String(v.clone()))
                    .map_err(|_| CliError::Input(format!("unknown variant '{v}'")))?;
            }
            set_opt(&mut cfg.out_dir, a.out_dir);
            print_outputs(&commands::efficiency(&cfg)?);
        }
        Command::Validate(a) => {
            let mut cfg: ValidateConfig = load(a.config.as_deref())?;
            set_opt(&mut cfg.input, a.input);
            let (report, ok) = commands::validate(&cfg)?;
            println!("{report}");
            if !ok {
                return Err(CliError::Input("retention is not monotone".into()));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn run(cli: Cli) -> ExitCode {
    if let Some(n) = cli.threads {
        if n == 0 {
            return CliError::Input("--threads must be at least 1".into()).report();
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return CliError::Runtime(format!("cannot start thread pool: {e}")).report();
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => e.report(),
    }
}
