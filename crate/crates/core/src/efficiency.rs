//! Relative efficiency of incremental versus deterministic-regime effects
//! when the propensity is a known constant `p`.
//!
//! The single-draw estimators compared here are `Π_t (A_t/p) · Y` (always
//! treated), `Π_t ((1−A_t)/(1−p)) · Y` (never treated) and
//! `Π_t ratio_t(A_t) · Y` (incremental). Their exact variances follow from
//! the potential-outcome moments, which are supplied by an [`OutcomeModel`].

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::intervention::shifted;

/// Largest horizon evaluated by full enumeration of treatment sequences.
pub const MAX_ENUMERATION_T: usize = 20;
const TMIN_CAP: usize = 1_000_000;

/// Potential-outcome moments `E[Y^ā]`, `E[(Y^ā)²]`.
pub trait OutcomeModel: Send + Sync {
    fn mean(&self, a: &[bool]) -> f64;
    fn second_moment(&self, a: &[bool]) -> f64;
    /// Finite support as `(value, probability)` pairs, when available.
    fn atoms(&self, _a: &[bool]) -> Option<Vec<(f64, f64)>> {
        None
    }
    /// True when the moments depend on `ā` only through its number of ones.
    fn exchangeable(&self) -> bool {
        false
    }
}

/// Variance of a standard normal truncated to `[-2, 2]`.
pub fn truncated_normal_variance() -> f64 {
    let n = Normal::standard();
    let mass = n.cdf(2.0) - n.cdf(-2.0);
    1.0 - 4.0 * n.pdf(2.0) / mass
}

/// `Y^ā = 10 + sqrt(#ones) + ε`, `ε` a standard normal truncated at ±2.
#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome {
    var: f64,
}

impl Default for TrialOutcome {
    fn default() -> Self {
        Self {
            var: truncated_normal_variance(),
        }
    }
}

impl OutcomeModel for TrialOutcome {
    fn mean(&self, a: &[bool]) -> f64 {
        10.0 + (a.iter().filter(|&&v| v).count() as f64).sqrt()
    }
    fn second_moment(&self, a: &[bool]) -> f64 {
        self.mean(a).powi(2) + self.var
    }
    fn exchangeable(&self) -> bool {
        true
    }
}

/// `Y^ā ∈ {0, 1}` with `P(Y^ā = 1) = prob(ā)`.
pub struct BinaryOutcome {
    prob: Box<dyn Fn(&[bool]) -> f64 + Send + Sync>,
    exchangeable: bool,
}

impl BinaryOutcome {
    pub fn new(prob: impl Fn(&[bool]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            prob: Box::new(prob),
            exchangeable: false,
        }
    }

    /// Probability depending on the number of ones only.
    pub fn by_count(prob: impl Fn(usize) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            prob: Box::new(move |a| prob(a.iter().filter(|&&v| v).count())),
            exchangeable: true,
        }
    }
}

impl OutcomeModel for BinaryOutcome {
    fn mean(&self, a: &[bool]) -> f64 {
        (self.prob)(a)
    }
    fn second_moment(&self, a: &[bool]) -> f64 {
        (self.prob)(a)
    }
    fn atoms(&self, a: &[bool]) -> Option<Vec<(f64, f64)>> {
        let p = (self.prob)(a);
        Some(vec![(0.0, 1.0 - p), (1.0, p)])
    }
    fn exchangeable(&self) -> bool {
        self.exchangeable
    }
}

/// Deterministic `Y^ā ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantOutcome(pub f64);

impl OutcomeModel for ConstantOutcome {
    fn mean(&self, _a: &[bool]) -> f64 {
        self.0
    }
    fn second_moment(&self, _a: &[bool]) -> f64 {
        self.0 * self.0
    }
    fn atoms(&self, _a: &[bool]) -> Option<Vec<(f64, f64)>> {
        Some(vec![(self.0, 1.0)])
    }
    fn exchangeable(&self) -> bool {
        true
    }
}

#[derive(Clone)]
pub struct MomentSpec {
    pub p: f64,
    pub delta: f64,
    pub horizon: usize,
    /// Bound on `|Y|`.
    pub b_u: f64,
    pub model: Arc<dyn OutcomeModel>,
}

impl std::fmt::Debug for MomentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentSpec")
            .field("p", &self.p)
            .field("delta", &self.delta)
            .field("horizon", &self.horizon)
            .field("b_u", &self.b_u)
            .finish_non_exhaustive()
    }
}

impl MomentSpec {
    pub fn new(p: f64, delta: f64, horizon: usize, b_u: f64, model: Arc<dyn OutcomeModel>) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("p must lie in (0, 1), got {p}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Domain(format!("delta must be positive, got {delta}")));
        }
        if horizon == 0 {
            return Err(Error::Domain("T must be at least 1".into()));
        }
        let spec = Self {
            p,
            delta,
            horizon,
            b_u,
            model,
        };
        for a in [spec.ones(), spec.zeros()] {
            let m = spec.model.mean(&a);
            let m2 = spec.model.second_moment(&a);
            if m.abs() > b_u * (1.0 + 1e-12) || m2 > b_u * b_u * (1.0 + 1e-12) {
                return Err(Error::Domain(format!("moments exceed the bound b_u = {b_u}")));
            }
        }
        if spec.model.second_moment(&spec.ones()) <= 0.0 {
            return Err(Error::Domain("E[(Y^1)^2] must be positive".into()));
        }
        Ok(spec)
    }

    /// Trial design moments with `b_u = 12 + sqrt(T)`.
    pub fn trial(p: f64, delta: f64, horizon: usize) -> Result<Self> {
        Self::new(p, delta, horizon, 12.0 + (horizon as f64).sqrt(), Arc::new(TrialOutcome::default()))
    }

    fn ones(&self) -> Vec<bool> {
        vec![true; self.horizon]
    }

    fn zeros(&self) -> Vec<bool> {
        vec![false; self.horizon]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AlwaysTreated,
    NeverTreated,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AlwaysTreated => "always_treated",
            Variant::NeverTreated => "never_treated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    /// Per-period base factor raised to the `T`-th power in both bounds.
    pub base: f64,
    pub c: f64,
    pub c_floor: f64,
}

fn regime_moments(spec: &MomentSpec, variant: Variant) -> (f64, f64, f64) {
    let (a, pr) = match variant {
        Variant::AlwaysTreated => (spec.ones(), spec.p),
        Variant::NeverTreated => (spec.zeros(), 1.0 - spec.p),
    };
    (spec.model.mean(&a), spec.model.second_moment(&a), pr)
}

/// Per-period base factor of the bounds.
pub fn base_factor(p: f64, delta: f64, variant: Variant) -> f64 {
    let den = (delta * p + 1.0 - p).powi(2);
    match variant {
        Variant::AlwaysTreated => (delta * delta * p * p + p * (1.0 - p)) / den,
        Variant::NeverTreated => (delta * delta * p * (1.0 - p) + (1.0 - p) * (1.0 - p)) / den,
    }
}

/// Smallest admissible `c` in the upper bound's `ζ` factor.
pub fn c_floor(spec: &MomentSpec, variant: Variant) -> f64 {
    let (m, m2, pr) = regime_moments(spec, variant);
    1.0 / (1.0 - pr.powi(spec.horizon as i32) * m * m / m2)
}

/// Lower and upper bounds on `Var(inc)/Var(regime)`. `c` defaults to
/// `1.001 × c_floor`.
pub fn re_bounds(spec: &MomentSpec, variant: Variant, c: Option<f64>) -> Result<Bounds> {
    let floor = c_floor(spec, variant);
    let c = c.unwrap_or(floor * 1.001);
    if c < floor {
        return Err(Error::Precondition(format!("c = {c} is below its floor {floor}")));
    }
    let (m, m2, pr) = regime_moments(spec, variant);
    let t = spec.horizon as i32;
    let base = base_factor(spec.p, spec.delta, variant);
    let c_t = spec.b_u * spec.b_u / m2;
    let zeta = 1.0 + c * m * m / ((1.0 / pr).powi(t) * m2);
    Ok(Bounds {
        lower: c_t * (base.powi(t) - pr.powi(t)),
        upper: c_t * zeta * base.powi(t),
        base,
        c,
        c_floor: floor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TminReport {
    /// Smallest `T` at which the bound expression is negative.
    pub first_negative: usize,
    /// `first_negative − 1`, the value under the "every `T > T_min`" reading.
    pub strict_convention: usize,
}

/// Scan for the smallest `T` with `r^T − c₁/p^T + 2 < 0`,
/// `r = (δ²p + 1 − p)/(δp + 1 − p)²`.
pub fn tmin_first_negative(delta: f64, p: f64, c1: f64) -> Result<TminReport> {
    if !(delta > 1.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must exceed 1, got {delta}")));
    }
    if !(p > 0.0 && p < 1.0) || !(c1 > 0.0 && c1 <= 1.0) {
        return Err(Error::Domain(format!("need 0 < p < 1 and 0 < c1 <= 1, got p={p}, c1={c1}")));
    }
    let r = (delta * delta * p + 1.0 - p) / (delta * p + 1.0 - p).powi(2);
    let (lr, lp) = (r.ln(), p.ln());
    for t in 1..=TMIN_CAP {
        let tf = t as f64;
        let value = (tf * lr).exp() - c1 * (-tf * lp).exp() + 2.0;
        if value < 0.0 {
            return Ok(TminReport {
                first_negative: t,
                strict_convention: t - 1,
            });
        }
    }
    Err(Error::Complexity(format!("no negative value up to T = {TMIN_CAP}")))
}

/// `w(ā) = Π_t π(a_t){a_t δ²p + (1−a_t)(1−p)}/(δp + 1 − p)²`.
pub fn sequence_weight(a: &[bool], delta: f64, p: f64) -> f64 {
    let den = (delta * p + 1.0 - p).powi(2);
    a.iter()
        .map(|&v| if v { p * delta * delta * p / den } else { (1.0 - p) * (1.0 - p) / den })
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleDraw {
    At,
    Nt,
    Inc,
}

fn sequence(bits: u64, horizon: usize) -> Vec<bool> {
    (0..horizon).map(|i| bits >> i & 1 == 1).collect()
}

fn count_sequence(k: usize, horizon: usize) -> Vec<bool> {
    (0..horizon).map(|i| i < k).collect()
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Exact variance of a single-draw estimator.
pub fn exact_variance_oracle(spec: &MomentSpec, estimator: SingleDraw) -> Result<f64> {
    let t = spec.horizon;
    let p = spec.p;
    match estimator {
        SingleDraw::At => {
            let a = spec.ones();
            let m = spec.model.mean(&a);
            Ok((1.0 / p).powi(t as i32) * spec.model.second_moment(&a) - m * m)
        }
        SingleDraw::Nt => {
            let a = spec.zeros();
            let m = spec.model.mean(&a);
            Ok((1.0 / (1.0 - p)).powi(t as i32) * spec.model.second_moment(&a) - m * m)
        }
        SingleDraw::Inc => {
            let den = (spec.delta * p + 1.0 - p).powi(2);
            let (w1, w0) = (spec.delta * spec.delta * p / den, (1.0 - p) / den);
            let q = shifted(p, spec.delta);
            if spec.model.exchangeable() {
                let (mut second, mut mean) = (0.0, 0.0);
                for k in 0..=t {
                    let a = count_sequence(k, t);
                    let lc = ln_choose(t, k);
                    let kf = k as f64;
                    let rest = (t - k) as f64;
                    second += (lc + kf * w1.ln() + rest * w0.ln()).exp() * spec.model.second_moment(&a);
                    let lq = if q > 0.0 { kf * q.ln() } else if k == 0 { 0.0 } else { f64::NEG_INFINITY };
                    let lq0 = if q < 1.0 { rest * (1.0 - q).ln() } else if k == t { 0.0 } else { f64::NEG_INFINITY };
                    mean += (lc + lq + lq0).exp() * spec.model.mean(&a);
                }
                return Ok(second - mean * mean);
            }
            if t > MAX_ENUMERATION_T {
                return Err(Error::Complexity(format!(
                    "T = {t} exceeds {MAX_ENUMERATION_T} for a non-exchangeable outcome model"
                )));
            }
            let (second, mean) = (0..1u64 << t)
                .into_par_iter()
                .map(|bits| {
                    let a = sequence(bits, t);
                    let k = a.iter().filter(|&&v| v).count() as i32;
                    let rest = t as i32 - k;
                    let wt = w1.powi(k) * w0.powi(rest);
                    let qa = q.powi(k) * (1.0 - q).powi(rest);
                    (wt * spec.model.second_moment(&a), qa * spec.model.mean(&a))
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
            Ok(second - mean * mean)
        }
    }
}

/// `|Var(inc) − Var(Σ_ā √w(ā) ψ̂_ā)|`, both sides by full enumeration,
/// where `ψ̂_ā = 1(A = ā)/Π π(a_t) · Y`.
pub fn decomposition_check(spec: &MomentSpec) -> Result<f64> {
    let t = spec.horizon;
    if t > 4 {
        return Err(Error::Precondition(format!("decomposition check supports T <= 4, got {t}")));
    }
    let (p, delta) = (spec.p, spec.delta);
    let seqs: Vec<Vec<bool>> = (0..1u64 << t).map(|b| sequence(b, t)).collect();
    let mut atoms = Vec::with_capacity(seqs.len());
    for a in &seqs {
        atoms.push(
            spec.model
                .atoms(a)
                .ok_or_else(|| Error::Precondition("decomposition check needs finite-support outcomes".into()))?,
        );
    }
    let prob = |a: &[bool]| a.iter().map(|&v| if v { p } else { 1.0 - p }).product::<f64>();
    let den = delta * p + 1.0 - p;
    let weight = |a: &[bool]| a.iter().map(|&v| if v { delta / den } else { 1.0 / den }).product::<f64>();

    // Left side: the incremental single-draw estimator over the joint law of (A, Y).
    let (mut e1, mut e2) = (0.0, 0.0);
    for (a, at) in seqs.iter().zip(&atoms) {
        let w = weight(a);
        for &(y, py) in at {
            let mass = prob(a) * py;
            e1 += mass * w * y;
            e2 += mass * (w * y).powi(2);
        }
    }
    let lhs = e2 - e1 * e1;

    // Right side: Σ_ā w Var(ψ̂_ā) + Σ_{ā≠ā'} √w √w' Cov(ψ̂_ā, ψ̂_ā').
    let moments: Vec<(f64, f64)> = atoms
        .iter()
        .map(|at| {
            let m: f64 = at.iter().map(|&(y, py)| y * py).sum();
            let m2: f64 = at.iter().map(|&(y, py)| y * y * py).sum();
            (m, m2)
        })
        .collect();
    let roots: Vec<f64> = seqs.iter().map(|a| sequence_weight(a, delta, p).sqrt()).collect();
    let mut rhs = 0.0;
    for i in 0..seqs.len() {
        let (m, m2) = moments[i];
        rhs += roots[i] * roots[i] * (m2 / prob(&seqs[i]) - m * m);
        for j in 0..seqs.len() {
            if i != j {
                rhs -= roots[i] * roots[j] * m * moments[j].0;
            }
        }
    }
    Ok((lhs - rhs).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub lower: f64,
    pub upper: f64,
    /// `Var(inc)/Var(regime)`.
    pub exact_ratio: Option<f64>,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub delta: f64,
    pub p: f64,
    pub rows: Vec<EfficiencyRow>,
    /// First `T` at which `Var(inc) < Var(regime)`.
    pub crossing: Option<usize>,
    /// Bound-expression scan, when `δ > 1`, with `c₁` the smallest
    /// `E[(Y^1)²]/b_u²` over the evaluated horizons.
    pub tmin: Option<TminReport>,
}

impl EfficiencyReport {
    /// CSV with columns `T, lower, upper, exact_ratio, variant`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "T,lower,upper,exact_ratio,variant")?;
        for r in &self.rows {
            let exact = r.exact_ratio.map(fmt_f64).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.horizon,
                fmt_f64(r.lower),
                fmt_f64(r.upper),
                exact,
                r.variant.name()
            )?;
        }
        Ok(())
    }
}

/// Bounds and exact ratios for `T = 1..=tmax`, with `spec_at(T)` supplying
/// the moments at each horizon.
pub fn re_curve(
    spec_at: impl Fn(usize) -> Result<MomentSpec> + Sync,
    tmax: usize,
    variant: Variant,
) -> Result<EfficiencyReport> {
    if tmax == 0 {
        return Err(Error::Domain("tmax must be at least 1".into()));
    }
    let rows_c1: Vec<(EfficiencyRow, f64)> = (1..=tmax)
        .into_par_iter()
        .map(|t| {
            let spec = spec_at(t)?;
            let b = re_bounds(&spec, variant, None)?;
            let regime = match variant {
                Variant::AlwaysTreated => SingleDraw::At,
                Variant::NeverTreated => SingleDraw::Nt,
            };
            let exact = match exact_variance_oracle(&spec, SingleDraw::Inc) {
                Ok(v) => Some(v / exact_variance_oracle(&spec, regime)?),
                Err(Error::Complexity(_)) => None,
                Err(e) => return Err(e),
            };
            let c1 = spec.model.second_moment(&spec.ones()) / (spec.b_u * spec.b_u);
            Ok((
                EfficiencyRow {
                    horizon: t,
                    lower: b.lower,
                    upper: b.upper,
                    exact_ratio: exact,
                    variant,
                },
                c1,
            ))
        })
        .collect::<Result<_>>()?;
    let first = spec_at(1)?;
    let crossing = rows_c1
        .iter()
        .find(|(r, _)| r.exact_ratio.is_some_and(|x| x < 1.0))
        .map(|(r, _)| r.horizon);
    let c1 = rows_c1.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min).min(1.0);
    let tmin = if first.delta > 1.0 {
        Some(tmin_first_negative(first.delta, first.p, c1)?)
    } else {
        None
    };
    Ok(EfficiencyReport {
        delta: first.delta,
        p: first.p,
        rows: rows_c1.into_iter().map(|(r, _)| r).collect(),
        crossing,
        tmin,
    })
}
