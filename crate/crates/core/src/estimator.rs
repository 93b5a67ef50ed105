//! Influence-function values and the effect-curve estimators.
//!
//! The uncentered efficient influence function at horizon `t` is
//!
//! ```text
//! φ = Σ_{s=1}^{t} C_{s−1} [g_s + b_s − ratio_s (R_{s+1}/ω_s) m_s(H_s, A_s)] R_s + C_t Y_t
//! ```
//!
//! with `ratio_s = (δA_s + 1 − A_s)/(δπ_s + 1 − π_s)`, `C_0 = 1`,
//! `C_s = C_{s−1} ratio_s R_{s+1}/ω_s`, `g_s` the shifted-propensity average of
//! `m_s(H_s, ·)` and `b_s = δ(A_s − π_s)(m_s(H_s,1) − m_s(H_s,0))/(δπ_s + 1 − π_s)²`.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::inference::estimate_variance;
use crate::intervention::DeltaGrid;
use crate::learner::{LearnerSpec, OracleFn};
use crate::nuisance::{
    fit_pseudo_outcome_sequence, pseudo_outcome, with_treatment, FitSummary, FitWarning, HistoryCache,
    NuisanceSet, NuisanceSpecs, TreatmentModels, EPS_OMEGA,
};
use crate::panel::{history_at, split_folds, FoldAssignment, PanelDataset, Trajectory};

/// Nuisance values and indicators of one subject at one time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInputs {
    /// `R_s`.
    pub retained: bool,
    /// `A_s` (ignored when not retained).
    pub treatment: bool,
    /// `R_{s+1}`.
    pub retained_next: bool,
    pub pi: f64,
    pub omega: f64,
    pub m1: f64,
    pub m0: f64,
}

/// Evaluate `φ` from per-step inputs. `y` is `Y_t`, required when the
/// subject is retained through `t + 1`. When `corrections` is given, the
/// bracketed term of every retained step is appended to it.
pub fn eif_from_steps(
    steps: &[StepInputs],
    y: Option<f64>,
    delta: f64,
    mut corrections: Option<&mut Vec<f64>>,
) -> Result<f64> {
    let mut c = 1.0;
    let mut phi = 0.0;
    let mut alive = true;
    for (idx, st) in steps.iter().enumerate() {
        if !st.retained {
            alive = false;
            break;
        }
        if !(st.pi > 0.0 && st.pi < 1.0) {
            return Err(Error::Invariant(format!("propensity {} outside (0, 1) at s={}", st.pi, idx + 1)));
        }
        if !(st.omega >= EPS_OMEGA && st.omega <= 1.0) {
            return Err(Error::Invariant(format!(
                "missingness propensity {} outside [{EPS_OMEGA}, 1] at s={}",
                st.omega,
                idx + 1
            )));
        }
        let den = delta * st.pi + 1.0 - st.pi;
        let ratio = if st.treatment { delta } else { 1.0 } / den;
        let g = pseudo_outcome(st.m1, st.m0, st.pi, delta);
        let a = if st.treatment { 1.0 } else { 0.0 };
        let b = delta * (a - st.pi) * (st.m1 - st.m0) / (den * den);
        let weight = if st.retained_next { ratio / st.omega } else { 0.0 };
        let m_obs = if st.treatment { st.m1 } else { st.m0 };
        let corr = g + b - weight * m_obs;
        if let Some(out) = corrections.as_deref_mut() {
            out.push(corr);
        }
        phi += c * corr;
        c *= weight;
        if !st.retained_next {
            alive = false;
            break;
        }
    }
    if alive {
        let y = y.ok_or_else(|| Error::Invariant("outcome missing for a subject retained at t+1".into()))?;
        phi += c * y;
    }
    if !phi.is_finite() {
        return Err(Error::Invariant("non-finite influence value".into()));
    }
    Ok(phi)
}

fn steps_for(tr: &Trajectory, eta: &NuisanceSet, t: usize) -> Result<Vec<StepInputs>> {
    let mut steps = Vec::with_capacity(t);
    let mut buf = Vec::new();
    for s in 1..=t {
        if !tr.retained(s) {
            break;
        }
        let h = history_at(tr, s)?.features();
        let a = tr.treatment(s).ok_or_else(|| Error::Invariant("missing treatment".into()))?;
        let pi = eta.pi(s, &h);
        let (omega, _) = eta.omega(s, with_treatment(&mut buf, &h, a));
        let (m1, m0) = eta.m_pair(s, &h, &mut buf);
        steps.push(StepInputs {
            retained: true,
            treatment: a,
            retained_next: tr.retained(s + 1),
            pi,
            omega,
            m1,
            m0,
        });
    }
    Ok(steps)
}

fn check_eta(eta: &NuisanceSet, delta: f64, t: usize) -> Result<()> {
    if eta.horizon() < t {
        return Err(Error::Precondition(format!(
            "nuisances fitted through t={}, requested t={t}",
            eta.horizon()
        )));
    }
    if eta.delta() != delta {
        return Err(Error::Precondition(format!(
            "nuisances fitted for delta={}, requested {delta}",
            eta.delta()
        )));
    }
    Ok(())
}

/// Uncentered influence value `φ(Z; η, δ, t)` of one trajectory.
pub fn eif_contribution(tr: &Trajectory, eta: &NuisanceSet, delta: f64, t: usize) -> Result<f64> {
    check_eta(eta, delta, t)?;
    let steps = steps_for(tr, eta, t)?;
    eif_from_steps(&steps, tr.outcome(t), delta, None)
}

/// `φ` together with the bracketed correction term of every retained step.
pub fn eif_with_corrections(tr: &Trajectory, eta: &NuisanceSet, delta: f64, t: usize) -> Result<(f64, Vec<f64>)> {
    check_eta(eta, delta, t)?;
    let steps = steps_for(tr, eta, t)?;
    let mut corr = Vec::with_capacity(t);
    let phi = eif_from_steps(&steps, tr.outcome(t), delta, Some(&mut corr))?;
    Ok((phi, corr))
}

/// Closed-form single-time-point influence value. `y` is ignored when `r`
/// is false.
#[allow(clippy::too_many_arguments)]
pub fn eif_point_exposure_oracle(
    a: bool,
    y: Option<f64>,
    r: bool,
    pi: f64,
    omega: f64,
    mu1: f64,
    mu0: f64,
    delta: f64,
) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) || !(omega > 0.0 && omega <= 1.0) || !(delta > 0.0) {
        return Err(Error::Domain(format!("invalid inputs pi={pi}, omega={omega}, delta={delta}")));
    }
    let y = if r {
        y.ok_or_else(|| Error::Domain("outcome required when r = 1".into()))?
    } else {
        0.0
    };
    let rr = if r { 1.0 } else { 0.0 };
    let phi1 = if a { rr * (y - mu1) / (pi * omega) } else { 0.0 } + mu1;
    let phi0 = if a { 0.0 } else { rr * (y - mu0) / ((1.0 - pi) * omega) } + mu0;
    let den = delta * pi + 1.0 - pi;
    let av = if a { 1.0 } else { 0.0 };
    Ok((delta * pi * phi1 + (1.0 - pi) * phi0) / den + delta * (mu1 - mu0) * (av - pi) / (den * den))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    CrossFit,
    Plugin,
    Ipw,
    /// Cross-fit on complete cases with `ω̂ ≡ 1`.
    NoCensoring,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::CrossFit => "cross_fit",
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::NoCensoring => "no_censoring",
        }
    }
}

/// `n × |grid|` matrix of influence values, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct EifMatrix {
    columns: Vec<Vec<f64>>,
    horizon: usize,
    grid: DeltaGrid,
    fold_labels: Vec<usize>,
    folds: usize,
}

impl EifMatrix {
    pub fn new(columns: Vec<Vec<f64>>, horizon: usize, grid: DeltaGrid, fold_labels: Vec<usize>, folds: usize) -> Result<Self> {
        if columns.len() != grid.len() {
            return Err(Error::Invariant("one column per delta required".into()));
        }
        let n = fold_labels.len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Invariant("ragged influence matrix".into()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite influence value".into()));
        }
        if fold_labels.iter().any(|&f| f >= folds) {
            return Err(Error::Invariant("fold label out of range".into()));
        }
        Ok(Self {
            columns,
            horizon,
            grid,
            fold_labels,
            folds,
        })
    }

    pub fn n(&self) -> usize {
        self.fold_labels.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn grid(&self) -> &DeltaGrid {
        &self.grid
    }

    pub fn column(&self, d: usize) -> &[f64] {
        &self.columns[d]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn value(&self, i: usize, d: usize) -> f64 {
        self.columns[d][i]
    }

    pub fn fold_labels(&self) -> &[usize] {
        &self.fold_labels
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    /// `ψ̂` per column: the average over folds of within-fold means.
    pub fn fold_average(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut per_fold = vec![vec![0.0; self.columns.len()]; self.folds];
        let mut counts = vec![0usize; self.folds];
        for &f in &self.fold_labels {
            counts[f] += 1;
        }
        for (d, col) in self.columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                per_fold[self.fold_labels[i]][d] += v;
            }
            for (k, row) in per_fold.iter_mut().enumerate() {
                row[d] /= counts[k] as f64;
            }
        }
        let psi = (0..self.columns.len())
            .map(|d| per_fold.iter().map(|row| row[d]).sum::<f64>() / self.folds as f64)
            .collect();
        (psi, per_fold)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    /// Subjects retained through `t + 1` (those carrying the terminal term).
    pub fully_weighted: usize,
    /// Number of `ω̂` evaluations raised to the floor.
    pub omega_floor_hits: usize,
    pub propensity_fits: Vec<Vec<FitSummary>>,
    pub missingness_fits: Vec<Vec<FitSummary>>,
    /// Outcome-regression fits per fold, for the first grid value.
    pub outcome_fits: Vec<Vec<FitSummary>>,
    pub warnings: Vec<FitWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub kind: EstimatorKind,
    pub t: usize,
    pub n: usize,
    pub grid: DeltaGrid,
    pub psi_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    /// `fold_psi[k][d]`: mean of fold `k` at grid index `d`.
    pub fold_psi: Vec<Vec<f64>>,
    pub diagnostics: EstimateDiagnostics,
}

impl EffectEstimate {
    /// CSV with columns `delta, psi_hat, sigma_hat, n`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "delta,psi_hat,sigma_hat,n")?;
        for (d, delta) in self.grid.values().iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(*delta),
                fmt_f64(self.psi_hat[d]),
                fmt_f64(self.sigma_hat[d]),
                self.n
            )?;
        }
        Ok(())
    }
}

/// Estimate plus the influence matrix it was computed from.
#[derive(Debug, Clone)]
pub struct Estimation {
    pub estimate: EffectEstimate,
    pub eif: EifMatrix,
}

struct Task {
    exclude: Option<usize>,
    members: Vec<usize>,
}

struct Column {
    values: Vec<(usize, f64)>,
    floor_hits: usize,
    outcome_fits: Option<Vec<FitSummary>>,
    warnings: Vec<FitWarning>,
}

fn evaluate(
    cache: &HistoryCache<'_>,
    eta: &NuisanceSet,
    members: &[usize],
    t: usize,
    delta: f64,
) -> Result<(Vec<(usize, f64)>, usize)> {
    let mut buf = Vec::new();
    let mut steps = Vec::with_capacity(t);
    let mut hits = 0;
    let mut out = Vec::with_capacity(members.len());
    for &i in members {
        steps.clear();
        for s in 1..=t {
            let Some(h) = cache.history(s, i) else { break };
            let a = cache
                .treatment(s, i)
                .ok_or_else(|| Error::Invariant("missing treatment".into()))?;
            let pi = eta.pi(s, h);
            let (omega, hit) = eta.omega(s, with_treatment(&mut buf, h, a));
            let retained_next = cache.retained(s + 1, i);
            hits += usize::from(hit && retained_next);
            let (m1, m0) = eta.m_pair(s, h, &mut buf);
            steps.push(StepInputs {
                retained: true,
                treatment: a,
                retained_next,
                pi,
                omega,
                m1,
                m0,
            });
        }
        out.push((i, eif_from_steps(&steps, cache.outcome(t, i), delta, None)?));
    }
    Ok((out, hits))
}

fn run(
    ds: &PanelDataset,
    folds: &FoldAssignment,
    cross: bool,
    specs: &NuisanceSpecs,
    grid: &DeltaGrid,
    t: usize,
    zero_outcome: bool,
    kind: EstimatorKind,
) -> Result<Estimation> {
    let cache = HistoryCache::new(ds, t)?;
    let n = ds.len();
    let tasks: Vec<Task> = if cross {
        (0..folds.folds())
            .map(|k| Task {
                exclude: Some(k),
                members: folds.members(k).collect(),
            })
            .collect()
    } else {
        vec![Task {
            exclude: None,
            members: (0..n).collect(),
        }]
    };
    let treatment: Vec<Arc<TreatmentModels>> = tasks
        .par_iter()
        .map(|task| TreatmentModels::fit(&cache, folds, specs, task.exclude).map(Arc::new))
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|k| (0..grid.len()).map(move |d| (k, d)))
        .collect();
    let columns: Vec<Column> = pairs
        .par_iter()
        .map(|&(k, d)| -> Result<Column> {
            let delta = grid.values()[d];
            let outcome = if zero_outcome {
                None
            } else {
                Some(fit_pseudo_outcome_sequence(
                    &cache,
                    folds,
                    &treatment[k].propensity.models,
                    &specs.outcome,
                    delta,
                    tasks[k].exclude,
                )?)
            };
            let outcome_fits = (d == 0).then(|| outcome.as_ref().map(|o| o.summaries())).flatten();
            let eta = NuisanceSet::new(Arc::clone(&treatment[k]), outcome, delta)?;
            let warnings = if d == 0 {
                eta.warnings()
            } else {
                eta.outcome_models().map(|o| o.warnings.clone()).unwrap_or_default()
            };
            let (values, floor_hits) = evaluate(&cache, &eta, &tasks[k].members, t, delta)?;
            Ok(Column {
                values,
                floor_hits,
                outcome_fits,
                warnings,
            })
        })
        .collect::<Result<_>>()?;

    let mut matrix = vec![vec![0.0; n]; grid.len()];
    let mut diagnostics = EstimateDiagnostics {
        fully_weighted: (0..n).filter(|&i| cache.retained(t + 1, i)).count(),
        ..EstimateDiagnostics::default()
    };
    for ((_, d), col) in pairs.iter().zip(columns) {
        for (i, v) in col.values {
            matrix[*d][i] = v;
        }
        diagnostics.omega_floor_hits += col.floor_hits;
        if let Some(f) = col.outcome_fits {
            diagnostics.outcome_fits.push(f);
        }
        diagnostics.warnings.extend(col.warnings);
    }
    for tm in &treatment {
        diagnostics.propensity_fits.push(tm.propensity.summaries());
        diagnostics.missingness_fits.push(tm.missingness.summaries());
    }
    if diagnostics.omega_floor_hits > 0 {
        log::warn!("missingness floor {EPS_OMEGA} active in {} evaluations", diagnostics.omega_floor_hits);
    }

    let (labels, n_folds) = if cross {
        (folds.labels().to_vec(), folds.folds())
    } else {
        (vec![0; n], 1)
    };
    let eif = EifMatrix::new(matrix, t, grid.clone(), labels, n_folds)?;
    let (psi_hat, fold_psi) = eif.fold_average();
    let sigma_hat = estimate_variance(&eif, &psi_hat)?;
    Ok(Estimation {
        estimate: EffectEstimate {
            kind,
            t,
            n,
            grid: grid.clone(),
            psi_hat,
            sigma_hat,
            fold_psi,
            diagnostics,
        },
        eif,
    })
}

/// Cross-fitted estimator: nuisances for fold `k` are trained on the other
/// `K − 1` folds and `ψ̂` averages the per-fold means.
pub fn estimate_cross_fit(
    ds: &PanelDataset,
    k: usize,
    seed: u64,
    specs: &NuisanceSpecs,
    grid: &DeltaGrid,
    t: usize,
) -> Result<Estimation> {
    let folds = split_folds(ds, k, seed)?;
    estimate_with_folds(ds, &folds, specs, grid, t)
}

/// Cross-fitted estimator on a given fold assignment.
pub fn estimate_with_folds(
    ds: &PanelDataset,
    folds: &FoldAssignment,
    specs: &NuisanceSpecs,
    grid: &DeltaGrid,
    t: usize,
) -> Result<Estimation> {
    if folds.folds() < 2 || folds.labels().len() != ds.len() {
        return Err(Error::Config("cross-fitting needs at least two folds covering the data".into()));
    }
    run(ds, folds, true, specs, grid, t, false, EstimatorKind::CrossFit)
}

/// Plug-in estimator: nuisances trained and evaluated on all subjects.
pub fn estimate_plugin(ds: &PanelDataset, specs: &NuisanceSpecs, grid: &DeltaGrid, t: usize) -> Result<Estimation> {
    run(ds, &FoldAssignment::single(ds.len()), false, specs, grid, t, false, EstimatorKind::Plugin)
}

/// IPW estimator `ℙ_n{Π_s ratio_s R_{s+1}/ω̂_s · Y_t}`: the plug-in with `m̂ ≡ 0`.
pub fn estimate_ipw(ds: &PanelDataset, specs: &NuisanceSpecs, grid: &DeltaGrid, t: usize) -> Result<Estimation> {
    run(ds, &FoldAssignment::single(ds.len()), false, specs, grid, t, true, EstimatorKind::Ipw)
}

/// Cross-fit estimator on the subjects retained through `t + 1`, with the
/// missingness model replaced by the constant 1.
pub fn estimate_no_censoring(
    ds: &PanelDataset,
    k: usize,
    seed: u64,
    specs: &NuisanceSpecs,
    grid: &DeltaGrid,
    t: usize,
) -> Result<Estimation> {
    if t == 0 || t > ds.horizon() {
        return Err(Error::Precondition(format!("t={t} outside 1..={}", ds.horizon())));
    }
    let complete: Vec<Trajectory> = ds
        .trajectories()
        .iter()
        .filter(|tr| tr.retained(t + 1))
        .cloned()
        .collect();
    if complete.len() < k {
        return Err(Error::Undefined(format!(
            "{} complete cases, fewer than {k} folds",
            complete.len()
        )));
    }
    let sub = PanelDataset::new(complete)?;
    let specs = NuisanceSpecs {
        missingness: LearnerSpec::Oracle(OracleFn::constant(1.0)),
        ..specs.clone()
    };
    let mut est = estimate_cross_fit(&sub, k, seed, &specs, grid, t)?;
    est.estimate.kind = EstimatorKind::NoCensoring;
    Ok(est)
}

/// Difference of mean `Y_t` between always-treated and never-treated
/// subjects retained through `t + 1`.
pub fn estimate_complete_case(ds: &PanelDataset, t: usize) -> Result<f64> {
    if t == 0 || t > ds.horizon() {
        return Err(Error::Precondition(format!("t={t} outside 1..={}", ds.horizon())));
    }
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for tr in ds.trajectories() {
        if !tr.retained(t + 1) {
            continue;
        }
        let Some(y) = tr.outcome(t) else { continue };
        let a: Vec<bool> = (1..=t).filter_map(|s| tr.treatment(s)).collect();
        if a.iter().all(|&v| v) {
            treated.push(y);
        } else if a.iter().all(|&v| !v) {
            control.push(y);
        }
    }
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Undefined(format!(
            "complete-case contrast needs both groups: {} always-treated, {} never-treated",
            treated.len(),
            control.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&treated) - mean(&control))
}
