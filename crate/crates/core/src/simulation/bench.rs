use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{design_propensity, simulate, DgpConfig, DgpKind};
use super::oracle::{true_psi_oracle, TruthPoint};
use crate::efficiency::{re_bounds, MomentSpec, Variant};
use crate::error::{Error, Result};
use crate::estimator::{estimate_cross_fit, estimate_ipw, estimate_no_censoring, estimate_plugin, EstimatorKind};
use crate::fmt_f64;
use crate::learner::LearnerSpec;
use crate::intervention::{ratio, DeltaGrid};
use crate::nuisance::NuisanceSpecs;
use crate::panel::{PanelDataset, Trajectory};
use crate::rng::derive_seed;

/// `(1/D) Σ_d (1/S) Σ_s ((ψ̂_{s,d} − ψ_d)/ψ̄)²`, optionally square-rooted.
pub fn normalized_rmse(estimates: &[Vec<f64>], truths: &[f64], psi_bar: f64, sqrt: bool) -> Result<f64> {
    if psi_bar == 0.0 || !psi_bar.is_finite() {
        return Err(Error::Domain("normalizing mean must be finite and non-zero".into()));
    }
    if estimates.is_empty() || truths.is_empty() || estimates.iter().any(|row| row.len() != truths.len()) {
        return Err(Error::Domain("estimate matrix must be S x D with D = number of truths".into()));
    }
    let s = estimates.len() as f64;
    let per_delta: f64 = (0..truths.len())
        .map(|d| estimates.iter().map(|row| ((row[d] - truths[d]) / psi_bar).powi(2)).sum::<f64>() / s)
        .sum();
    let value = per_delta / truths.len() as f64;
    Ok(if sqrt { value.sqrt() } else { value })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub dgp: DgpConfig,
    /// Replications `S`.
    pub replications: usize,
    pub grid: DeltaGrid,
    pub estimators: Vec<EstimatorKind>,
    pub folds: usize,
    /// Monte Carlo size of the ground truth.
    pub truth_draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub sqrt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub estimator: String,
    pub delta: f64,
    pub truth: f64,
    pub mean_estimate: f64,
    /// Mean of `((ψ̂ − ψ)/ψ̄)²` over replications.
    pub normalized_sq_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub rmse: BTreeMap<String, f64>,
    /// Mean realized dropout percentage at the horizon.
    pub dropout_pct: f64,
    pub s: usize,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub u_l: Option<f64>,
    pub sqrt: bool,
    pub truths: Vec<TruthPoint>,
    pub errors: Vec<ErrorRow>,
}

impl BenchmarkResult {
    /// Per-(estimator, δ) error table.
    pub fn write_error_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "estimator,delta,truth,mean_estimate,normalized_sq_error")?;
        for r in &self.errors {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.estimator,
                fmt_f64(r.delta),
                fmt_f64(r.truth),
                fmt_f64(r.mean_estimate),
                fmt_f64(r.normalized_sq_error)
            )?;
        }
        Ok(())
    }
}

fn run_estimator(
    kind: EstimatorKind,
    ds: &PanelDataset,
    specs: &NuisanceSpecs,
    grid: &DeltaGrid,
    t: usize,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let est = match kind {
        EstimatorKind::CrossFit => estimate_cross_fit(ds, folds, seed, specs, grid, t)?,
        EstimatorKind::Plugin => estimate_plugin(ds, specs, grid, t)?,
        EstimatorKind::Ipw => estimate_ipw(ds, specs, grid, t)?,
        EstimatorKind::NoCensoring => estimate_no_censoring(ds, folds, seed, specs, grid, t)?,
    };
    Ok(est.estimate.psi_hat)
}

/// Learners used by the benchmark unless configured otherwise. Unpenalized
/// logistic regression separates on the sparse dropout events of late time
/// points, so missingness uses a clipped ridge fit.
pub fn benchmark_specs() -> NuisanceSpecs {
    NuisanceSpecs {
        propensity: LearnerSpec::LogisticIrls,
        missingness: LearnerSpec::Ridge { lambda: 100.0 },
        outcome: LearnerSpec::Ridge { lambda: 1.0 },
    }
}

/// Repeat simulate-then-estimate `S` times and score each estimator against
/// the Monte Carlo truth at the panel horizon.
pub fn run_benchmark(cfg: &BenchmarkConfig, specs: &NuisanceSpecs) -> Result<BenchmarkResult> {
    cfg.dgp.validate()?;
    if cfg.replications == 0 || cfg.estimators.is_empty() {
        return Err(Error::Config("benchmark needs S >= 1 and at least one estimator".into()));
    }
    let t = cfg.dgp.horizon;
    let truths = true_psi_oracle(&cfg.dgp, &cfg.grid, t, cfg.truth_draws, derive_seed(cfg.seed, u64::MAX))?;
    let truth_values: Vec<f64> = truths.iter().map(|p| p.psi).collect();
    let psi_bar = truth_values.iter().sum::<f64>() / truth_values.len() as f64;

    let reps: Vec<(f64, Vec<Vec<f64>>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|s| {
            let data_seed = derive_seed(cfg.seed, s as u64);
            let ds = simulate(&DgpConfig {
                seed: data_seed,
                ..cfg.dgp
            })?;
            let fits = cfg
                .estimators
                .iter()
                .map(|&kind| run_estimator(kind, &ds, specs, &cfg.grid, t, cfg.folds, derive_seed(data_seed, 1)))
                .collect::<Result<Vec<_>>>()?;
            Ok((ds.dropout_fraction(t) * 100.0, fits))
        })
        .collect::<Result<_>>()?;

    let mut rmse = BTreeMap::new();
    let mut errors = Vec::new();
    for (e, kind) in cfg.estimators.iter().enumerate() {
        let matrix: Vec<Vec<f64>> = reps.iter().map(|(_, fits)| fits[e].clone()).collect();
        rmse.insert(kind.name().to_string(), normalized_rmse(&matrix, &truth_values, psi_bar, cfg.sqrt)?);
        for (d, truth) in truths.iter().enumerate() {
            let s = matrix.len() as f64;
            errors.push(ErrorRow {
                estimator: kind.name().to_string(),
                delta: truth.delta,
                truth: truth.psi,
                mean_estimate: matrix.iter().map(|r| r[d]).sum::<f64>() / s,
                normalized_sq_error: matrix.iter().map(|r| ((r[d] - truth.psi) / psi_bar).powi(2)).sum::<f64>() / s,
            });
        }
    }
    let dropout_pct = reps.iter().map(|(d, _)| d).sum::<f64>() / reps.len() as f64;
    Ok(BenchmarkResult {
        rmse,
        dropout_pct,
        s: cfg.replications,
        n: cfg.dgp.n,
        d: cfg.grid.len(),
        horizon: t,
        u_l: match cfg.dgp.kind {
            DgpKind::DropoutSim { u_l } => Some(u_l),
            _ => None,
        },
        sqrt: cfg.sqrt,
        truths,
        errors,
    })
}

/// True propensity of subject `tr` at `t` under a no-dropout design.
fn true_propensity(kind: DgpKind, tr: &Trajectory, t: usize) -> Result<f64> {
    match kind {
        DgpKind::Trial { p } => Ok(p),
        DgpKind::Observational => {
            let u: f64 = tr.covariates(t).map(|x| x.iter().sum()).ok_or_else(|| Error::Invariant("missing covariates".into()))?;
            let lag = |s: usize| if s >= 1 { tr.treatment(s) } else { None };
            Ok(design_propensity(u, lag(t.wrapping_sub(1)), lag(t.wrapping_sub(2))))
        }
        DgpKind::DropoutSim { .. } => Err(Error::Config("relative efficiency needs a no-dropout design".into())),
    }
}

/// Single-draw estimates `(always, never, incremental)` with known propensities.
fn single_draw_estimates(kind: DgpKind, ds: &PanelDataset, delta: f64) -> Result<(f64, f64, f64)> {
    let t = ds.horizon();
    let (mut at, mut nt, mut inc) = (0.0, 0.0, 0.0);
    for tr in ds.trajectories() {
        let y = tr.outcome(t).ok_or_else(|| Error::Invariant("missing outcome".into()))?;
        let (mut w_at, mut w_nt, mut w_inc) = (1.0, 1.0, 1.0);
        for s in 1..=t {
            let pi = true_propensity(kind, tr, s)?;
            let a = tr.treatment(s).ok_or_else(|| Error::Invariant("missing treatment".into()))?;
            w_at *= if a { 1.0 / pi } else { 0.0 };
            w_nt *= if a { 0.0 } else { 1.0 / (1.0 - pi) };
            w_inc *= ratio(a, pi, delta);
        }
        at += w_at * y;
        nt += w_nt * y;
        inc += w_inc * y;
    }
    let n = ds.len() as f64;
    Ok((at / n, nt / n, inc / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeEfficiencyPoint {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub var_at: f64,
    pub var_nt: f64,
    pub var_inc: f64,
    /// `Var(at)/Var(inc)`; `None` when a variance is zero.
    pub ratio_at: Option<f64>,
    pub ratio_nt: Option<f64>,
    /// `1/upper` from the analytic bounds (trial design only), the implied
    /// lower bound on `Var(at)/Var(inc)`.
    pub lower_bound_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeEfficiencyCurve {
    pub delta: f64,
    pub reps: usize,
    pub n: usize,
    pub points: Vec<RelativeEfficiencyPoint>,
    /// Horizons dropped because `Var(inc)` or `Var(at)` was zero.
    pub excluded: Vec<usize>,
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Monte Carlo variances of the single-draw estimators across `reps`
/// simulated panels of `cfg.n` subjects, for each horizon in `horizons`.
pub fn relative_efficiency_mc(
    cfg: &DgpConfig,
    delta: f64,
    horizons: std::ops::RangeInclusive<usize>,
    reps: usize,
    seed: u64,
) -> Result<RelativeEfficiencyCurve> {
    cfg.validate()?;
    if matches!(cfg.kind, DgpKind::DropoutSim { .. }) {
        return Err(Error::Config("relative efficiency needs the trial or observational design".into()));
    }
    if reps < 2 || *horizons.start() == 0 {
        return Err(Error::Config("need reps >= 2 and horizons starting at 1".into()));
    }
    let points: Vec<Option<RelativeEfficiencyPoint>> = horizons
        .clone()
        .into_par_iter()
        .map(|t| {
            let draws = (0..reps)
                .map(|r| {
                    let ds = simulate(&DgpConfig {
                        horizon: t,
                        seed: derive_seed(derive_seed(seed, t as u64), r as u64),
                        ..*cfg
                    })?;
                    single_draw_estimates(cfg.kind, &ds, delta)
                })
                .collect::<Result<Vec<_>>>()?;
            let var_at = sample_variance(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
            let var_nt = sample_variance(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
            let var_inc = sample_variance(&draws.iter().map(|d| d.2).collect::<Vec<_>>());
            if var_inc <= 0.0 || var_at <= 0.0 {
                log::warn!("T={t}: zero sample variance, point excluded");
                return Ok(None);
            }
            let lower_bound_at = match cfg.kind {
                DgpKind::Trial { p } => {
                    let spec = MomentSpec::trial(p, delta, t)?;
                    Some(1.0 / re_bounds(&spec, Variant::AlwaysTreated, None)?.upper)
                }
                _ => None,
            };
            Ok(Some(RelativeEfficiencyPoint {
                horizon: t,
                var_at,
                var_nt,
                var_inc,
                ratio_at: Some(var_at / var_inc),
                ratio_nt: (var_nt > 0.0).then(|| var_nt / var_inc),
                lower_bound_at,
            }))
        })
        .collect::<Result<_>>()?;
    let excluded = horizons.zip(&points).filter(|(_, p)| p.is_none()).map(|(t, _)| t).collect();
    Ok(RelativeEfficiencyCurve {
        delta,
        reps,
        n: cfg.n,
        points: points.into_iter().flatten().collect(),
        excluded,
    })
}
