//! Ground truth for the synthetic designs: Monte Carlo effect curves and
//! the true nuisance functions, usable as oracle learners.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dgp::{design_outcome_mean, design_propensity, draw_path, Assignment, DgpConfig, DgpKind};
use crate::error::{Error, Result};
use crate::intervention::{shifted, DeltaGrid};
use crate::learner::{expit, LearnerSpec, OracleFn, OracleQuery};
use crate::nuisance::NuisanceSpecs;
use crate::panel::FeatureLayout;
use crate::quadrature::{simpson, NormalRule};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub delta: f64,
    pub psi: f64,
    /// Monte Carlo standard error.
    pub se: f64,
}

const CHUNK: usize = 8192;

/// `ψ_t(δ)` by drawing `m` paths with treatment from the shifted propensity
/// and no dropout. Replicate `j` uses stream `(seed, j)` for every `δ`.
pub fn true_psi_oracle(cfg: &DgpConfig, grid: &DeltaGrid, t: usize, m: usize, seed: u64) -> Result<Vec<TruthPoint>> {
    cfg.validate()?;
    if t == 0 || m < 2 {
        return Err(Error::Config("truth needs t >= 1 and m >= 2".into()));
    }
    let chunks = m.div_ceil(CHUNK);
    grid.values()
        .par_iter()
        .map(|&delta| {
            let sums: Vec<(f64, f64)> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in c * CHUNK..((c + 1) * CHUNK).min(m) {
                        let mut gen = rng::stream(seed, j as u64);
                        let path = draw_path(cfg.kind, t, &mut gen, Assignment::Shifted(delta), false);
                        let y = path.y.expect("complete path has an outcome");
                        s1 += y;
                        s2 += y * y;
                    }
                    (s1, s2)
                })
                .collect();
            let (s1, s2) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
            let mf = m as f64;
            let psi = s1 / mf;
            let var = ((s2 - mf * psi * psi) / (mf - 1.0)).max(0.0);
            Ok(TruthPoint {
                delta,
                psi,
                se: (var / mf).sqrt(),
            })
        })
        .collect()
}

/// `E|U + v|` for `U ~ N(0, 2)`.
fn folded_mean(v: f64) -> f64 {
    let s = 2f64.sqrt();
    s * (2.0 / PI).sqrt() * (-v * v / 4.0).exp() + v * (1.0 - 2.0 * Normal::standard().cdf(-v / s))
}

/// `E_u[q(expit(u + L); δ)]`, `u ~ N(0, 2)`, for `L = -2, ..., 2`.
#[derive(Debug)]
struct ShiftTable {
    rule: NormalRule,
    cache: RwLock<HashMap<u64, [f64; 5]>>,
}

impl ShiftTable {
    fn new() -> Self {
        Self {
            rule: NormalRule::new(2f64.sqrt(), 800),
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn get(&self, delta: f64) -> [f64; 5] {
        let key = delta.to_bits();
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return *v;
        }
        let rule = &self.rule;
        let mut table = [0.0; 5];
        for (i, slot) in table.iter_mut().enumerate() {
            let l = i as f64 - 2.0;
            *slot = rule.expect(|u| shifted(expit(u + l), delta));
        }
        self.cache.write().expect("cache lock").insert(key, table);
        table
    }
}

/// Lag offset of the treatment model at time `r` given `A_{r−1}`, `A_{r−2}`.
fn lag_index(r: usize, lag1: bool, lag2: bool) -> usize {
    let mut l = 0i32;
    if r >= 2 {
        l += if lag1 { 1 } else { -1 };
    }
    if r >= 3 {
        l += if lag2 { 1 } else { -1 };
    }
    (l + 2) as usize
}

fn layout_of(q: &OracleQuery<'_>) -> FeatureLayout {
    q.layout.expect("oracle nuisances need the feature layout")
}

fn u_at(layout: &FeatureLayout, f: &[f64], s: usize) -> f64 {
    if s == 0 {
        0.0
    } else {
        layout.covariates(f, s).iter().sum()
    }
}

fn a_at(layout: &FeatureLayout, f: &[f64], s: usize) -> bool {
    if s == layout.t {
        layout.current_treatment(f).expect("features end with the current treatment")
    } else {
        s >= 1 && layout.treatment(f, s)
    }
}

/// Design outcome regression `m_s(H_s, a_s)` for horizon `horizon`.
fn design_outcome(table: &ShiftTable, q: &OracleQuery<'_>, horizon: usize) -> f64 {
    let layout = layout_of(q);
    let f = q.features;
    let s = q.t;
    let a_s = a_at(&layout, f, s);
    let a_prev = a_at(&layout, f, s - 1);
    if s == horizon {
        return design_outcome_mean(a_s, a_prev, u_at(&layout, f, s), u_at(&layout, f, s - 1));
    }
    let delta = q.delta.expect("outcome oracle needs delta");
    let shift = table.get(delta);
    if s + 1 == horizon {
        let p_next = shift[lag_index(horizon, a_s, a_prev)];
        return 10.0 + f64::from(u8::from(a_s)) + p_next + folded_mean(u_at(&layout, f, s));
    }
    // Joint law of (A_r, A_{r−1}) propagated from r = s to the horizon.
    let mut joint = [[0.0; 2]; 2];
    joint[usize::from(a_s)][usize::from(a_prev)] = 1.0;
    let mut p_last = [0.0; 2];
    for r in s + 1..=horizon {
        let mut next = [[0.0; 2]; 2];
        for (l1, row) in joint.iter().enumerate() {
            for (l2, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let p1 = shift[lag_index(r, l1 == 1, l2 == 1)];
                next[1][l1] += w * p1;
                next[0][l1] += w * (1.0 - p1);
            }
        }
        joint = next;
        if r + 1 >= horizon {
            p_last[horizon - r] = joint[1][0] + joint[1][1];
        }
    }
    // p_last[0] = P(A_T = 1), p_last[1] = P(A_{T−1} = 1).
    // u_T + u_{T−1} ~ N(0, 4) is independent of the history.
    10.0 + p_last[0] + p_last[1] + 2.0 * (2.0 / PI).sqrt()
}

/// Posterior mean of `expit(C0 + Σ_{r≤t} A_r)` given survival through `t`,
/// with `C0 ~ U[u_l, 5]`.
fn dropout_omega(u_l: f64, a: &[bool]) -> f64 {
    let mut cum = Vec::with_capacity(a.len());
    let mut s = 0.0;
    for &v in a {
        s += f64::from(u8::from(v));
        cum.push(s);
    }
    let t = a.len();
    if u_l >= 5.0 {
        return expit(5.0 + cum[t - 1]);
    }
    let survive = |c: f64| cum[..t - 1].iter().map(|&sr| expit(c + sr)).product::<f64>();
    let num = simpson(|c| expit(c + cum[t - 1]) * survive(c), u_l, 5.0, 200);
    let den = simpson(survive, u_l, 5.0, 200);
    num / den
}

fn binomial_pmf(n: usize, q: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut coef = 1.0;
    for j in 0..=n {
        if j > 0 {
            coef *= (n - j + 1) as f64 / j as f64;
        }
        out.push(coef * q.powi(j as i32) * (1.0 - q).powi((n - j) as i32));
    }
    out
}

/// True nuisance functions of `kind` for estimation at `horizon`.
pub fn oracle_specs(kind: DgpKind, horizon: usize) -> NuisanceSpecs {
    match kind {
        DgpKind::Trial { p } => NuisanceSpecs {
            propensity: LearnerSpec::Oracle(OracleFn::constant(p)),
            missingness: LearnerSpec::Oracle(OracleFn::constant(1.0)),
            outcome: LearnerSpec::Oracle(OracleFn::new(move |q| {
                let layout = layout_of(q);
                let s = q.t;
                let k = (1..=s).filter(|&r| a_at(&layout, q.features, r)).count();
                let qd = shifted(p, q.delta.expect("outcome oracle needs delta"));
                binomial_pmf(horizon - s, qd)
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * (10.0 + ((k + j) as f64).sqrt()))
                    .sum()
            })),
        },
        DgpKind::DropoutSim { .. } | DgpKind::Observational => {
            let table = Arc::new(ShiftTable::new());
            let propensity = OracleFn::new(|q| {
                let layout = layout_of(q);
                let t = q.t;
                let lag = |s: usize| (s >= 1).then(|| layout.treatment(q.features, s));
                design_propensity(u_at(&layout, q.features, t), t.checked_sub(1).and_then(lag), t.checked_sub(2).and_then(lag))
            });
            let missingness = match kind {
                DgpKind::DropoutSim { u_l } => {
                    let cache: Arc<RwLock<HashMap<(usize, u64), f64>>> = Arc::default();
                    OracleFn::new(move |q| {
                        let layout = layout_of(q);
                        let a: Vec<bool> = (1..=q.t).map(|s| a_at(&layout, q.features, s)).collect();
                        if a.len() > 64 {
                            return dropout_omega(u_l, &a);
                        }
                        let bits = a.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (u64::from(v) << i));
                        let key = (a.len(), bits);
                        if let Some(v) = cache.read().expect("cache lock").get(&key) {
                            return *v;
                        }
                        let v = dropout_omega(u_l, &a);
                        cache.write().expect("cache lock").insert(key, v);
                        v
                    })
                }
                _ => OracleFn::constant(1.0),
            };
            NuisanceSpecs {
                propensity: LearnerSpec::Oracle(propensity),
                missingness: LearnerSpec::Oracle(missingness),
                outcome: LearnerSpec::Oracle(OracleFn::new(move |q| design_outcome(&table, q, horizon))),
            }
        }
    }
}
