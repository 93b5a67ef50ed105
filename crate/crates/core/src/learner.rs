//! Built-in nuisance learners.
//!
//! Three learners cover the nuisance regressions: logistic regression fit by
//! iteratively reweighted least squares, closed-form ridge regression, and
//! k-nearest-neighbour averaging. An oracle variant wraps a known function
//! so simulations can plug in the true nuisances.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::FeatureLayout;

/// Lower/upper clip for probability predictions.
pub const EPS_CLIP: f64 = 1e-6;

const IRLS_MAX_ITER: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;
const JITTER: f64 = 1e-10;

/// Arguments passed to an oracle nuisance function.
#[derive(Debug, Clone, Copy)]
pub struct OracleQuery<'a> {
    /// Time index of the regression (1-based).
    pub t: usize,
    /// The `δ` for which a pseudo-outcome regression is fitted, if any.
    pub delta: Option<f64>,
    /// Flattened `H_t`, possibly followed by a treatment value.
    pub features: &'a [f64],
    pub layout: Option<FeatureLayout>,
}

#[derive(Clone)]
pub struct OracleFn(Arc<dyn Fn(&OracleQuery<'_>) -> f64 + Send + Sync>);

impl OracleFn {
    pub fn new(f: impl Fn(&OracleQuery<'_>) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(value: f64) -> Self {
        Self::new(move |_| value)
    }

    pub fn call(&self, q: &OracleQuery<'_>) -> f64 {
        (self.0)(q)
    }
}

impl fmt::Debug for OracleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("OracleFn")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    LogisticIrls,
    Knn {
        k: usize,
    },
    Ridge {
        lambda: f64,
    },
    #[serde(skip)]
    Oracle(OracleFn),
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LearnerSpec::Knn { k } if *k == 0 => Err(Error::Config("knn needs k >= 1".into())),
            LearnerSpec::Ridge { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Probability,
    Regression,
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl FeatureMatrix {
    pub fn new(cols: usize) -> Self {
        Self {
            data: Vec::new(),
            rows: 0,
            cols,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(cols);
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::Invariant(format!(
                "feature row has {} columns, expected {}",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Mean computed by running updates; exact when all inputs are equal.
pub(crate) fn running_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 {
            mean = v;
        } else {
            mean += (v - mean) / (i as f64 + 1.0);
        }
    }
    mean
}

#[inline]
pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub n_train: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &FeatureMatrix) -> Self {
        let p = x.cols();
        let mut mean = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for j in 0..p {
            let col = (0..x.rows()).map(|i| x.row(i)[j]);
            mean[j] = running_mean(col);
            let var = (0..x.rows())
                .map(|i| (x.row(i)[j] - mean[j]).powi(2))
                .sum::<f64>()
                / x.rows() as f64;
            if var > 1e-24 {
                scale[j] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            row.iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
}

#[derive(Debug, Clone)]
enum Model {
    Constant(f64),
    Logistic { coef: Vec<f64> },
    Ridge { std: Standardizer, intercept: f64, coef: Vec<f64> },
    Knn { std: Standardizer, train: FeatureMatrix, targets: Vec<f64>, k: usize },
    Oracle { f: OracleFn, t: usize, delta: Option<f64>, layout: Option<FeatureLayout> },
}

/// A fitted learner; immutable and safe to share across threads.
#[derive(Debug, Clone)]
pub struct FittedModel {
    model: Model,
    task: Task,
    meta: FitMeta,
}

impl FittedModel {
    pub fn constant(value: f64, task: Task) -> Self {
        Self {
            model: Model::Constant(value),
            task,
            meta: FitMeta {
                converged: true,
                ..FitMeta::default()
            },
        }
    }

    pub fn oracle(f: OracleFn, task: Task, ctx: &FitContext) -> Self {
        Self {
            model: Model::Oracle {
                f,
                t: ctx.t,
                delta: ctx.delta,
                layout: ctx.layout,
            },
            task,
            meta: FitMeta {
                converged: true,
                ..FitMeta::default()
            },
        }
    }

    pub fn meta(&self) -> &FitMeta {
        &self.meta
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self.model, Model::Oracle { .. })
    }

    /// Raw-scale slopes and intercept for ridge and logistic fits.
    pub fn coefficients(&self) -> Option<(f64, Vec<f64>)> {
        match &self.model {
            Model::Logistic { coef } => Some((coef[0], coef[1..].to_vec())),
            Model::Ridge { std, intercept, coef } => {
                let slopes: Vec<f64> = coef.iter().zip(&std.scale).map(|(b, s)| b / s).collect();
                let shift: f64 = slopes.iter().zip(&std.mean).map(|(b, m)| b * m).sum();
                Some((intercept - shift, slopes))
            }
            _ => None,
        }
    }

    /// Prediction; probabilities from fitted classifiers are clipped to
    /// `[EPS_CLIP, 1 − EPS_CLIP]`, oracle values pass through unchanged.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let raw = match &self.model {
            Model::Constant(c) => *c,
            Model::Logistic { coef } => {
                let eta = coef[0] + coef[1..].iter().zip(features).map(|(b, x)| b * x).sum::<f64>();
                expit(eta)
            }
            Model::Ridge { std, intercept, coef } => {
                let mut z = Vec::with_capacity(features.len());
                std.apply(features, &mut z);
                intercept + coef.iter().zip(&z).map(|(b, x)| b * x).sum::<f64>()
            }
            Model::Knn { std, train, targets, k } => knn_predict(std, train, targets, *k, features),
            Model::Oracle { f, t, delta, layout } => {
                return f.call(&OracleQuery {
                    t: *t,
                    delta: *delta,
                    features,
                    layout: *layout,
                })
            }
        };
        match self.task {
            Task::Probability => raw.clamp(EPS_CLIP, 1.0 - EPS_CLIP),
            Task::Regression => raw,
        }
    }
}

/// Context handed to oracle learners.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitContext {
    pub t: usize,
    pub delta: Option<f64>,
    pub layout: Option<FeatureLayout>,
}

pub fn fit_learner(spec: &LearnerSpec, x: &FeatureMatrix, y: &[f64], task: Task) -> Result<FittedModel> {
    fit_learner_with(spec, x, y, task, &FitContext::default())
}

pub fn fit_learner_with(
    spec: &LearnerSpec,
    x: &FeatureMatrix,
    y: &[f64],
    task: Task,
    ctx: &FitContext,
) -> Result<FittedModel> {
    spec.validate()?;
    if let LearnerSpec::Oracle(f) = spec {
        return Ok(FittedModel::oracle(f.clone(), task, ctx));
    }
    if x.rows() != y.len() {
        return Err(Error::Fit(format!(
            "{} feature rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Fit("no training rows".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite training target".into()));
    }
    if task == Task::Probability {
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Fit("probability targets must be 0 or 1".into()));
        }
        let first = y[0];
        if y.iter().all(|&v| v == first) {
            let mut m = FittedModel::constant(first.clamp(EPS_CLIP, 1.0 - EPS_CLIP), task);
            m.meta.n_train = y.len();
            return Ok(m);
        }
    }
    let n_train = y.len();
    let (model, iterations, converged) = match spec {
        LearnerSpec::LogisticIrls => {
            let (coef, iters, conv) = logistic_irls(x, y)?;
            (Model::Logistic { coef }, iters, conv)
        }
        LearnerSpec::Ridge { lambda } => {
            let std = Standardizer::fit(x);
            let (intercept, coef) = ridge(x, y, &std, *lambda)?;
            (Model::Ridge { std, intercept, coef }, 1, true)
        }
        LearnerSpec::Knn { k } => {
            let std = Standardizer::fit(x);
            let mut train = FeatureMatrix::new(x.cols());
            let mut buf = Vec::with_capacity(x.cols());
            for i in 0..x.rows() {
                std.apply(x.row(i), &mut buf);
                train.push(&buf)?;
            }
            (
                Model::Knn {
                    std,
                    train,
                    targets: y.to_vec(),
                    k: *k,
                },
                0,
                true,
            )
        }
        LearnerSpec::Oracle(_) => unreachable!("handled above"),
    };
    Ok(FittedModel {
        model,
        task,
        meta: FitMeta {
            n_train,
            iterations,
            converged,
        },
    })
}

/// Solve the symmetric positive semi-definite system `a · x = b`, adding
/// diagonal jitter until the Cholesky factorization succeeds.
fn spd_solve(mut a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut jitter = JITTER;
    for i in 0..n {
        a[(i, i)] += jitter;
    }
    for _ in 0..12 {
        if let Some(ch) = a.clone().cholesky() {
            return Ok(ch.solve(b));
        }
        let extra = jitter * 9.0 * scale;
        for i in 0..n {
            a[(i, i)] += extra;
        }
        jitter *= 10.0;
    }
    Err(Error::Fit("normal equations could not be factorized".into()))
}

fn log_likelihood(x: &FeatureMatrix, y: &[f64], coef: &[f64]) -> f64 {
    (0..x.rows())
        .map(|i| {
            let eta = coef[0] + coef[1..].iter().zip(x.row(i)).map(|(b, v)| b * v).sum::<f64>();
            // log σ(η) = −log(1 + e^{−η}), computed stably.
            let log1pexp = |z: f64| if z > 35.0 { z } else { z.exp().ln_1p() };
            if y[i] > 0.5 {
                -log1pexp(-eta)
            } else {
                -log1pexp(eta)
            }
        })
        .sum()
}

/// Newton–Raphson / IRLS for the Bernoulli log-likelihood with intercept.
fn logistic_irls(x: &FeatureMatrix, y: &[f64]) -> Result<(Vec<f64>, usize, bool)> {
    let n = x.rows();
    let p = x.cols() + 1;
    let mut coef = vec![0.0; p];
    let mut ll = log_likelihood(x, y, &coef);
    let mut row = vec![0.0; p];
    for iter in 0..IRLS_MAX_ITER {
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let mut grad = DVector::<f64>::zeros(p);
        for i in 0..n {
            row[0] = 1.0;
            row[1..].copy_from_slice(x.row(i));
            let eta: f64 = coef.iter().zip(&row).map(|(b, v)| b * v).sum();
            let mu = expit(eta);
            let w = mu * (1.0 - mu);
            let resid = y[i] - mu;
            for a in 0..p {
                grad[a] += row[a] * resid;
                let wa = w * row[a];
                for b in 0..=a {
                    hess[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        if grad.norm() / n as f64 <= IRLS_GRAD_TOL {
            return Ok((coef, iter, true));
        }
        let step = spd_solve(hess, &grad)?;
        // Step halving keeps the likelihood non-decreasing under (quasi-)separation.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + scale * s).collect();
            let trial_ll = log_likelihood(x, y, &trial);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs() {
                coef = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Ok((coef, iter + 1, false));
        }
    }
    Ok((coef, IRLS_MAX_ITER, false))
}

fn ridge(x: &FeatureMatrix, y: &[f64], std: &Standardizer, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let n = x.rows();
    let p = x.cols();
    let intercept = running_mean(y.iter().copied());
    if p == 0 {
        return Ok((intercept, Vec::new()));
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut z = Vec::with_capacity(p);
    for i in 0..n {
        std.apply(x.row(i), &mut z);
        let yc = y[i] - intercept;
        for a in 0..p {
            xty[a] += z[a] * yc;
            for b in 0..=a {
                xtx[(a, b)] += z[a] * z[b];
            }
        }
    }
    for a in 0..p {
        xtx[(a, a)] += lambda;
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let coef = spd_solve(xtx, &xty)?;
    Ok((intercept, coef.iter().copied().collect()))
}

fn knn_predict(std: &Standardizer, train: &FeatureMatrix, targets: &[f64], k: usize, features: &[f64]) -> f64 {
    let mut z = Vec::with_capacity(features.len());
    std.apply(features, &mut z);
    let mut dist: Vec<(f64, usize)> = (0..train.rows())
        .map(|i| {
            let d2: f64 = train.row(i).iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    let k = k.min(dist.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_unstable_by(cmp);
    running_mean(dist.iter().map(|&(_, i)| targets[i]))
}
