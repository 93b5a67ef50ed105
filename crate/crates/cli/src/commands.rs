use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ipsi_core::efficiency::{re_curve, MomentSpec};
use ipsi_core::estimator::{estimate_cross_fit, estimate_ipw, estimate_no_censoring, estimate_plugin, EstimatorKind};
use ipsi_core::inference::uniform_band;
use ipsi_core::panel::{load_long_csv, parse_long_csv, validate_monotonicity, write_long_csv, PanelDataset};
use ipsi_core::simulation::{run_benchmark, simulate, BenchmarkConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{require, BenchConfig, EfficiencyConfig, EstimateConfig, SimulateConfig, ValidateConfig};
use crate::error::{io_error, CliError};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn out_dir(dir: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = require(dir, "out_dir")?;
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Input(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn with_writer(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> ipsi_core::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| io_error(path, e))
}

pub fn estimate(cfg: &EstimateConfig) -> Result<Vec<PathBuf>, CliError> {
    let input = require(cfg.input.clone(), "input")?;
    let seed = require(cfg.seed, "seed")?;
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(CliError::Input(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    for spec in [&cfg.learners.propensity, &cfg.learners.missingness, &cfg.learners.outcome] {
        spec.validate()?;
    }
    let grid = cfg.grid.build()?;
    let ds = load_long_csv(&input, &cfg.schema)?;
    let t = cfg.t.unwrap_or(ds.horizon());
    let dir = out_dir(cfg.out_dir.clone())?;

    let specs = &cfg.learners;
    let est = match cfg.estimator {
        EstimatorKind::CrossFit => estimate_cross_fit(&ds, cfg.folds, seed, specs, &grid, t)?,
        EstimatorKind::Plugin => estimate_plugin(&ds, specs, &grid, t)?,
        EstimatorKind::Ipw => estimate_ipw(&ds, specs, &grid, t)?,
        EstimatorKind::NoCensoring => estimate_no_censoring(&ds, cfg.folds, seed, specs, &grid, t)?,
    };
    let band = uniform_band(
        &est.eif,
        &est.estimate.psi_hat,
        &est.estimate.sigma_hat,
        cfg.alpha,
        cfg.bootstrap,
        seed,
    )?;

    let effect_path = dir.join("effect.csv");
    let band_path = dir.join("band.csv");
    let diag_path = dir.join("diagnostics.json");
    with_writer(&effect_path, |w| est.estimate.write_csv(w))?;
    with_writer(&band_path, |w| band.write_csv(w))?;
    write_json(
        &diag_path,
        &json!({
            "config": cfg,
            "dataset": ds.metadata(),
            "estimator": cfg.estimator.name(),
            "t": t,
            "psi_hat": est.estimate.psi_hat,
            "sigma_hat": est.estimate.sigma_hat,
            "fold_psi": est.estimate.fold_psi,
            "c_alpha": band.c_alpha,
            "z": band.z,
            "excluded_deltas": band.excluded_deltas,
            "diagnostics": est.estimate.diagnostics,
        }),
    )?;
    Ok(vec![effect_path, band_path, diag_path])
}

pub fn simulate_panel(cfg: &SimulateConfig) -> Result<Vec<PathBuf>, CliError> {
    let seed = require(cfg.seed, "seed")?;
    let out = require(cfg.out.clone(), "out")?;
    let dgp = cfg.dgp.build(seed)?;
    let ds = simulate(&dgp)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    write_long_csv(&ds, &out)?;
    let meta_path = sidecar(&out);
    write_json(
        &meta_path,
        &json!({
            "config": cfg,
            "dgp": dgp,
            "dataset": ds.metadata(),
            "dropout_fraction": ds.dropout_fraction(ds.horizon()),
        }),
    )?;
    Ok(vec![out, meta_path])
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn bench(cfg: &BenchConfig) -> Result<Vec<PathBuf>, CliError> {
    let seed = require(cfg.seed, "seed")?;
    let dir = out_dir(cfg.out_dir.clone())?;
    let bench_cfg = BenchmarkConfig {
        dgp: cfg.dgp.build(seed)?,
        replications: cfg.replications,
        grid: cfg.grid.build()?,
        estimators: cfg.estimators.clone(),
        folds: cfg.folds,
        truth_draws: cfg.truth_draws,
        seed,
        sqrt: cfg.sqrt,
    };
    let result = run_benchmark(&bench_cfg, &cfg.learners)?;
    let json_path = dir.join("bench.json");
    let errors_path = dir.join("errors.csv");
    write_json(&json_path, &json!({ "config": cfg, "result": result }))?;
    with_writer(&errors_path, |w| result.write_error_csv(w))?;
    Ok(vec![json_path, errors_path])
}

pub fn efficiency(cfg: &EfficiencyConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = out_dir(cfg.out_dir.clone())?;
    MomentSpec::trial(cfg.p, cfg.delta, 1)?;
    let report = re_curve(|t| MomentSpec::trial(cfg.p, cfg.delta, t), cfg.tmax, cfg.variant)?;
    let csv_path = dir.join("efficiency.csv");
    let json_path = dir.join("efficiency.json");
    with_writer(&csv_path, |w| report.write_csv(w))?;
    write_json(&json_path, &json!({ "config": cfg, "report": report }))?;
    Ok(vec![csv_path, json_path])
}

/// Returns the report and whether the panel passed.
pub fn validate(cfg: &ValidateConfig) -> Result<(serde_json::Value, bool), CliError> {
    let input = require(cfg.input.clone(), "input")?;
    let file = File::open(&input).map_err(|e| io_error(&input, e))?;
    let trajectories = parse_long_csv(file, &cfg.schema)?;
    let report = validate_monotonicity(&trajectories);
    if !report.is_empty() {
        return Ok((json!({ "valid": false, "violations": report.violations }), false));
    }
    let ds = PanelDataset::new(trajectories)?;
    Ok((json!({ "valid": true, "dataset": ds.metadata() }), true))
}
