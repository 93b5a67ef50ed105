//! Nuisance fitting: treatment propensities `π̂_t`, missingness propensities
//! `ω̂_t` and the backward pseudo-outcome regressions `m̂_t`.
//!
//! All pipelines work on a [`HistoryCache`], which flattens each retained
//! subject's history once per time point. A training pool is the set of
//! subjects whose fold label differs from the excluded fold (or everyone
//! when no fold is excluded).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::shifted;
use crate::learner::{fit_learner_with, FeatureMatrix, FitContext, FitMeta, FittedModel, LearnerSpec, Task};
use crate::panel::{history_at, FeatureLayout, FoldAssignment, PanelDataset};

/// Floor applied to every `ω̂` prediction.
pub const EPS_OMEGA: f64 = 0.01;

/// Learner choice per nuisance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceSpecs {
    pub propensity: LearnerSpec,
    pub missingness: LearnerSpec,
    pub outcome: LearnerSpec,
}

impl Default for NuisanceSpecs {
    fn default() -> Self {
        Self {
            propensity: LearnerSpec::LogisticIrls,
            missingness: LearnerSpec::LogisticIrls,
            outcome: LearnerSpec::Knn { k: 20 },
        }
    }
}

/// Flattened histories `H_t` for `t = 1..=horizon`.
#[derive(Debug)]
pub struct HistoryCache<'a> {
    ds: &'a PanelDataset,
    horizon: usize,
    layouts: Vec<FeatureLayout>,
    rows: Vec<Vec<Option<Vec<f64>>>>,
}

impl<'a> HistoryCache<'a> {
    pub fn new(ds: &'a PanelDataset, horizon: usize) -> Result<Self> {
        if horizon == 0 || horizon > ds.horizon() {
            return Err(Error::Precondition(format!(
                "horizon {horizon} outside 1..={}",
                ds.horizon()
            )));
        }
        let mut rows = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let col = ds
                .trajectories()
                .iter()
                .map(|tr| {
                    if tr.retained(t) {
                        history_at(tr, t).map(|h| Some(h.features()))
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(col);
        }
        Ok(Self {
            ds,
            horizon,
            layouts: (1..=horizon).map(|t| ds.layout(t)).collect(),
            rows,
        })
    }

    pub fn dataset(&self) -> &PanelDataset {
        self.ds
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn layout(&self, t: usize) -> FeatureLayout {
        self.layouts[t - 1]
    }

    /// `H_t` of subject `i`, if retained at `t`.
    pub fn history(&self, t: usize, i: usize) -> Option<&[f64]> {
        self.rows[t - 1][i].as_deref()
    }

    pub fn treatment(&self, t: usize, i: usize) -> Option<bool> {
        self.ds.trajectories()[i].treatment(t)
    }

    pub fn retained(&self, t: usize, i: usize) -> bool {
        self.ds.trajectories()[i].retained(t)
    }

    pub fn outcome(&self, t: usize, i: usize) -> Option<f64> {
        self.ds.trajectories()[i].outcome(t)
    }
}

/// Writes `H_t` followed by the treatment value into `buf`.
pub(crate) fn with_treatment<'b>(buf: &'b mut Vec<f64>, h: &[f64], a: bool) -> &'b [f64] {
    buf.clear();
    buf.extend_from_slice(h);
    buf.push(if a { 1.0 } else { 0.0 });
    buf
}

/// Which subjects train a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldProvenance {
    /// Fold whose subjects were held out; `None` means all subjects trained.
    pub excluded_fold: Option<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl FoldProvenance {
    pub fn trains_on(&self, label: usize) -> bool {
        self.excluded_fold != Some(label)
    }
}

fn in_pool(folds: &FoldAssignment, exclude: Option<usize>, i: usize) -> bool {
    exclude.is_none_or(|k| folds.fold_of(i) != k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitWarning {
    pub nuisance: String,
    pub t: usize,
    pub excluded_fold: Option<usize>,
    pub message: String,
}

/// Per-`t` fit summary used in diagnostics output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub t: usize,
    #[serde(flatten)]
    pub meta: FitMeta,
}

/// One fitted model per time point, `models[t-1]`.
#[derive(Debug, Clone)]
pub struct ModelSequence {
    pub models: Vec<FittedModel>,
    pub warnings: Vec<FitWarning>,
    pub provenance: FoldProvenance,
}

impl ModelSequence {
    pub fn summaries(&self) -> Vec<FitSummary> {
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| FitSummary {
                t: i + 1,
                meta: m.meta().clone(),
            })
            .collect()
    }
}

fn check_pool(
    name: &str,
    spec: &LearnerSpec,
    n_train: usize,
    t: usize,
    dim: usize,
    exclude: Option<usize>,
    warnings: &mut Vec<FitWarning>,
) -> Result<()> {
    if matches!(spec, LearnerSpec::Oracle(_)) {
        return Ok(());
    }
    if n_train == 0 {
        return Err(Error::Fit(format!("{name}: no training subjects at t={t}")));
    }
    let needed = (dim * t + 2).max(10);
    if n_train < needed {
        let message = format!("{n_train} training subjects at t={t}, fewer than {needed}");
        log::warn!("{name}: {message}");
        warnings.push(FitWarning {
            nuisance: name.to_string(),
            t,
            excluded_fold: exclude,
            message,
        });
    }
    Ok(())
}

fn provenance(folds: &FoldAssignment, exclude: Option<usize>) -> FoldProvenance {
    FoldProvenance {
        excluded_fold: exclude,
        folds: folds.folds(),
        seed: folds.seed(),
    }
}

/// Regress `A_t` on `H_t` over pool subjects with `R_t = 1`, `t = 1..=horizon`.
pub fn fit_propensity_sequence(
    cache: &HistoryCache<'_>,
    folds: &FoldAssignment,
    spec: &LearnerSpec,
    exclude: Option<usize>,
) -> Result<ModelSequence> {
    let mut models = Vec::with_capacity(cache.horizon());
    let mut warnings = Vec::new();
    for t in 1..=cache.horizon() {
        let layout = cache.layout(t);
        let mut x = FeatureMatrix::new(layout.history_len());
        let mut y = Vec::new();
        if !matches!(spec, LearnerSpec::Oracle(_)) {
            for i in 0..cache.len() {
                if let (true, Some(h), Some(a)) = (in_pool(folds, exclude, i), cache.history(t, i), cache.treatment(t, i)) {
                    x.push(h)?;
                    y.push(if a { 1.0 } else { 0.0 });
                }
            }
        }
        check_pool("propensity", spec, y.len(), t, layout.dim, exclude, &mut warnings)?;
        let ctx = FitContext {
            t,
            delta: None,
            layout: Some(layout),
        };
        models.push(fit_learner_with(spec, &x, &y, Task::Probability, &ctx)?);
    }
    Ok(ModelSequence {
        models,
        warnings,
        provenance: provenance(folds, exclude),
    })
}

/// Regress `R_{t+1}` on `(H_t, A_t)` over pool subjects with `R_t = 1`.
pub fn fit_missingness_sequence(
    cache: &HistoryCache<'_>,
    folds: &FoldAssignment,
    spec: &LearnerSpec,
    exclude: Option<usize>,
) -> Result<ModelSequence> {
    let mut models = Vec::with_capacity(cache.horizon());
    let mut warnings = Vec::new();
    let mut buf = Vec::new();
    for t in 1..=cache.horizon() {
        let layout = cache.layout(t);
        let mut x = FeatureMatrix::new(layout.history_len() + 1);
        let mut y = Vec::new();
        if !matches!(spec, LearnerSpec::Oracle(_)) {
            for i in 0..cache.len() {
                if let (true, Some(h), Some(a)) = (in_pool(folds, exclude, i), cache.history(t, i), cache.treatment(t, i)) {
                    x.push(with_treatment(&mut buf, h, a))?;
                    y.push(if cache.retained(t + 1, i) { 1.0 } else { 0.0 });
                }
            }
        }
        check_pool("missingness", spec, y.len(), t, layout.dim, exclude, &mut warnings)?;
        let ctx = FitContext {
            t,
            delta: None,
            layout: Some(layout),
        };
        models.push(fit_learner_with(spec, &x, &y, Task::Probability, &ctx)?);
    }
    Ok(ModelSequence {
        models,
        warnings,
        provenance: provenance(folds, exclude),
    })
}

/// Backward recursion for `m̂_t`, `t = horizon..1`, at a fixed `δ`.
///
/// `M_{t*+1} = Y_{t*}`; at each `t` the model regresses `M_{t+1}` on
/// `(H_t, A_t)` over pool subjects with `R_{t+1} = 1`, then sets
/// `M_t = [m̂_t(H_t,1)δπ̂_t + m̂_t(H_t,0)(1 − π̂_t)] / (δπ̂_t + 1 − π̂_t)` for
/// pool subjects with `R_t = 1`.
pub fn fit_pseudo_outcome_sequence(
    cache: &HistoryCache<'_>,
    folds: &FoldAssignment,
    pi_hat: &[FittedModel],
    spec: &LearnerSpec,
    delta: f64,
    exclude: Option<usize>,
) -> Result<ModelSequence> {
    let horizon = cache.horizon();
    if pi_hat.len() < horizon {
        return Err(Error::Precondition(format!(
            "propensity models cover {} time points, need {horizon}",
            pi_hat.len()
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be positive and finite, got {delta}")));
    }
    let n = cache.len();
    let oracle = matches!(spec, LearnerSpec::Oracle(_));
    if !oracle && !cache.dataset().outcome_recorded(horizon) {
        let any_retained = (0..n).any(|i| cache.retained(horizon + 1, i));
        if any_retained {
            return Err(Error::Precondition(format!("outcome Y_{horizon} is not recorded")));
        }
    }
    // next[i] holds M_{t+1} for pool subjects with R_{t+1} = 1.
    let mut next: Vec<Option<f64>> = (0..n)
        .map(|i| {
            if in_pool(folds, exclude, i) && cache.retained(horizon + 1, i) {
                cache.outcome(horizon, i)
            } else {
                None
            }
        })
        .collect();
    let mut models: Vec<FittedModel> = Vec::with_capacity(horizon);
    let mut warnings = Vec::new();
    let mut buf = Vec::new();
    for t in (1..=horizon).rev() {
        let layout = cache.layout(t);
        let mut x = FeatureMatrix::new(layout.history_len() + 1);
        let mut y = Vec::new();
        if !oracle {
            for i in 0..n {
                if let (Some(target), Some(h), Some(a)) = (next[i], cache.history(t, i), cache.treatment(t, i)) {
                    x.push(with_treatment(&mut buf, h, a))?;
                    y.push(target);
                }
            }
        }
        check_pool("outcome", spec, y.len(), t, layout.dim, exclude, &mut warnings)?;
        let ctx = FitContext {
            t,
            delta: Some(delta),
            layout: Some(layout),
        };
        let model = fit_learner_with(spec, &x, &y, Task::Regression, &ctx)?;
        if !oracle && t > 1 {
            for (i, slot) in next.iter_mut().enumerate() {
                *slot = match cache.history(t, i) {
                    Some(h) if in_pool(folds, exclude, i) => {
                        let pi = pi_hat[t - 1].predict(h);
                        let m1 = model.predict(with_treatment(&mut buf, h, true));
                        let m0 = model.predict(with_treatment(&mut buf, h, false));
                        Some(pseudo_outcome(m1, m0, pi, delta))
                    }
                    _ => None,
                };
            }
        }
        models.push(model);
    }
    models.reverse();
    Ok(ModelSequence {
        models,
        warnings,
        provenance: provenance(folds, exclude),
    })
}

/// `∫ m(H, a) dQ(a | H)` with `Q` the shifted propensity.
#[inline]
pub fn pseudo_outcome(m1: f64, m0: f64, pi: f64, delta: f64) -> f64 {
    m0 + shifted(pi, delta) * (m1 - m0)
}

/// Fitted `π̂` and `ω̂` sequences; shared by every `δ` of a fold.
#[derive(Debug, Clone)]
pub struct TreatmentModels {
    pub propensity: ModelSequence,
    pub missingness: ModelSequence,
}

impl TreatmentModels {
    pub fn fit(
        cache: &HistoryCache<'_>,
        folds: &FoldAssignment,
        specs: &NuisanceSpecs,
        exclude: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            propensity: fit_propensity_sequence(cache, folds, &specs.propensity, exclude)?,
            missingness: fit_missingness_sequence(cache, folds, &specs.missingness, exclude)?,
        })
    }
}

/// The nuisance set `η̂ = (π̂, ω̂, m̂)` for one `δ` and one excluded fold.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    treatment: Arc<TreatmentModels>,
    /// `None` means `m̂ ≡ 0`.
    outcome: Option<ModelSequence>,
    delta: f64,
    horizon: usize,
}

impl NuisanceSet {
    pub fn new(treatment: Arc<TreatmentModels>, outcome: Option<ModelSequence>, delta: f64) -> Result<Self> {
        let horizon = treatment.propensity.models.len();
        let lens_ok = treatment.missingness.models.len() == horizon
            && outcome.as_ref().is_none_or(|o| o.models.len() == horizon);
        if !lens_ok {
            return Err(Error::Invariant("nuisance sequences differ in length".into()));
        }
        if let Some(o) = &outcome {
            if o.provenance.excluded_fold != treatment.propensity.provenance.excluded_fold {
                return Err(Error::Invariant("nuisance sequences from different folds".into()));
            }
        }
        Ok(Self {
            treatment,
            outcome,
            delta,
            horizon,
        })
    }

    /// Fit all three sequences on the pool that excludes `exclude`.
    pub fn fit(
        cache: &HistoryCache<'_>,
        folds: &FoldAssignment,
        specs: &NuisanceSpecs,
        delta: f64,
        exclude: Option<usize>,
    ) -> Result<Self> {
        let treatment = Arc::new(TreatmentModels::fit(cache, folds, specs, exclude)?);
        let outcome = fit_pseudo_outcome_sequence(
            cache,
            folds,
            &treatment.propensity.models,
            &specs.outcome,
            delta,
            exclude,
        )?;
        Self::new(treatment, Some(outcome), delta)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn provenance(&self) -> FoldProvenance {
        self.treatment.propensity.provenance
    }

    pub fn treatment_models(&self) -> &TreatmentModels {
        &self.treatment
    }

    pub fn outcome_models(&self) -> Option<&ModelSequence> {
        self.outcome.as_ref()
    }

    pub fn pi(&self, t: usize, h: &[f64]) -> f64 {
        self.treatment.propensity.models[t - 1].predict(h)
    }

    /// `ω̂_t(H_t, A_t)` with the floor applied; the flag reports whether the
    /// floor was active.
    pub fn omega(&self, t: usize, h_and_a: &[f64]) -> (f64, bool) {
        let w = self.treatment.missingness.models[t - 1].predict(h_and_a);
        if w < EPS_OMEGA {
            (EPS_OMEGA, true)
        } else {
            (w.min(1.0), false)
        }
    }

    /// `(m̂_t(H_t, 1), m̂_t(H_t, 0))`.
    pub fn m_pair(&self, t: usize, h: &[f64], buf: &mut Vec<f64>) -> (f64, f64) {
        match &self.outcome {
            None => (0.0, 0.0),
            Some(o) => {
                let m = &o.models[t - 1];
                let m1 = m.predict(with_treatment(buf, h, true));
                let m0 = m.predict(with_treatment(buf, h, false));
                (m1, m0)
            }
        }
    }

    pub fn warnings(&self) -> Vec<FitWarning> {
        let mut w = self.treatment.propensity.warnings.clone();
        w.extend(self.treatment.missingness.warnings.iter().cloned());
        if let Some(o) = &self.outcome {
            w.extend(o.warnings.iter().cloned());
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::OracleFn;
    use crate::panel::{split_folds, Trajectory};

    fn toy(n: usize, t_max: usize, y_of: impl Fn(usize) -> f64) -> PanelDataset {
        let trs = (0..n)
            .map(|i| {
                let x: Vec<Option<Vec<f64>>> = (0..t_max).map(|s| Some(vec![(i * 7 + s) as f64 % 5.0])).collect();
                let a: Vec<Option<bool>> = (0..t_max).map(|s| Some((i + s) % 3 == 0)).collect();
                let mut y = vec![None; t_max];
                y[t_max - 1] = Some(y_of(i));
                Trajectory::new(format!("s{i}"), x, a, y, vec![true; t_max + 1]).unwrap()
            })
            .collect();
        PanelDataset::new(trs).unwrap()
    }

    #[test]
    fn constant_outcome_gives_constant_regressions() {
        let ds = toy(40, 3, |_| 4.5);
        let cache = HistoryCache::new(&ds, 3).unwrap();
        let folds = FoldAssignment::single(ds.len());
        for spec in [LearnerSpec::Knn { k: 3 }, LearnerSpec::Ridge { lambda: 0.1 }] {
            let specs = NuisanceSpecs {
                outcome: spec,
                ..NuisanceSpecs::default()
            };
            let eta = NuisanceSet::fit(&cache, &folds, &specs, 2.0, None).unwrap();
            let mut buf = Vec::new();
            for t in 1..=3 {
                for i in 0..ds.len() {
                    let (m1, m0) = eta.m_pair(t, cache.history(t, i).unwrap(), &mut buf);
                    assert_eq!((m1, m0), (4.5, 4.5), "t={t} i={i} {:?}", eta.outcome_models().unwrap().models[t - 1]);
                }
            }
        }
    }

    #[test]
    fn pseudo_outcome_limits() {
        assert_eq!(pseudo_outcome(3.0, 1.0, 0.4, 1e-300), 1.0);
        assert!((pseudo_outcome(3.0, 1.0, 0.4, 1e-12) - 1.0).abs() < 1e-9);
        assert!((pseudo_outcome(3.0, 1.0, 0.4, 1.0) - (0.4 * 3.0 + 0.6)).abs() < 1e-15);
    }

    #[test]
    fn oracle_propensity_is_exact() {
        let ds = toy(12, 2, |i| i as f64);
        let cache = HistoryCache::new(&ds, 2).unwrap();
        let folds = split_folds(&ds, 2, 1).unwrap();
        let f = OracleFn::new(|q| 0.2 + 0.1 * q.features[0] / 5.0 + 0.01 * q.t as f64);
        let seq = fit_propensity_sequence(&cache, &folds, &LearnerSpec::Oracle(f), Some(0)).unwrap();
        let h = cache.history(2, 3).unwrap();
        assert_eq!(seq.models[1].predict(h), 0.2 + 0.1 * h[0] / 5.0 + 0.02);
    }

    #[test]
    fn no_dropout_omega_is_near_one() {
        let ds = toy(30, 2, |i| i as f64);
        let cache = HistoryCache::new(&ds, 2).unwrap();
        let folds = FoldAssignment::single(ds.len());
        let seq = fit_missingness_sequence(&cache, &folds, &LearnerSpec::LogisticIrls, None).unwrap();
        let mut buf = Vec::new();
        for t in 1..=2 {
            let h = cache.history(t, 0).unwrap();
            assert_eq!(seq.models[t - 1].predict(with_treatment(&mut buf, h, true)), 1.0 - 1e-6);
        }
    }

    #[test]
    fn empty_pool_is_a_fit_error() {
        // One subject observed through t=2, the rest drop out after t=1.
        let mut trs = Vec::new();
        for i in 0..3 {
            let full = i == 0;
            let x = vec![Some(vec![i as f64]), if full { Some(vec![1.0]) } else { None }];
            let a = vec![Some(i % 2 == 0), if full { Some(true) } else { None }];
            let y = vec![None, if full { Some(1.0) } else { None }];
            trs.push(Trajectory::new(format!("s{i}"), x, a, y, vec![true, full, full]).unwrap());
        }
        let ds = PanelDataset::new(trs).unwrap();
        let cache = HistoryCache::new(&ds, 2).unwrap();
        let folds = crate::panel::split_indices(3, 3, 0).unwrap();
        let k = folds.fold_of(0);
        let err = fit_propensity_sequence(&cache, &folds, &LearnerSpec::LogisticIrls, Some(k)).unwrap_err();
        assert!(matches!(err, Error::Fit(_)), "{err}");
    }

    #[test]
    fn small_pool_warns() {
        let ds = toy(8, 1, |i| i as f64);
        let cache = HistoryCache::new(&ds, 1).unwrap();
        let folds = FoldAssignment::single(ds.len());
        let seq = fit_propensity_sequence(&cache, &folds, &LearnerSpec::LogisticIrls, None).unwrap();
        assert_eq!(seq.warnings.len(), 1);
        assert_eq!(seq.warnings[0].t, 1);
    }

    #[test]
    fn provenance_excludes_fold() {
        let ds = toy(20, 1, |i| i as f64);
        let cache = HistoryCache::new(&ds, 1).unwrap();
        let folds = split_folds(&ds, 2, 9).unwrap();
        let eta = NuisanceSet::fit(&cache, &folds, &NuisanceSpecs::default(), 1.0, Some(1)).unwrap();
        let p = eta.provenance();
        assert!(!p.trains_on(1) && p.trains_on(0));
        // Training size equals the complement of fold 1.
        let n_train = eta.treatment_models().propensity.models[0].meta().n_train;
        assert_eq!(n_train, folds.sizes()[0]);
    }
}
