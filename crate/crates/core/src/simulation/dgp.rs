use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::shifted;
use crate::learner::expit;
use crate::panel::{PanelDataset, Trajectory};
use crate::rng;

/// Structural model family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpKind {
    /// Two normal covariates per time, history-dependent treatment and
    /// monotone dropout driven by a subject-level frailty `C0 ~ U[u_l, 5]`.
    DropoutSim { u_l: f64 },
    /// Randomized treatment with constant probability `p`, no dropout and
    /// outcome `10 + sqrt(#treated)` plus truncated normal noise.
    Trial { p: f64 },
    /// The dropout design's covariates and treatment model without dropout.
    Observational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    #[serde(flatten)]
    pub kind: DgpKind,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.horizon == 0 {
            return Err(Error::Config("n and T must be at least 1".into()));
        }
        match self.kind {
            DgpKind::DropoutSim { u_l } if !(u_l <= 5.0 && u_l.is_finite()) => {
                Err(Error::Config(format!("u_l must be finite and <= 5, got {u_l}")))
            }
            DgpKind::Trial { p } if !(p > 0.0 && p < 1.0) => Err(Error::Config(format!("p must lie in (0, 1), got {p}"))),
            _ => Ok(()),
        }
    }

    /// Covariate dimension of generated panels.
    pub fn dim(&self) -> usize {
        match self.kind {
            DgpKind::Trial { .. } => 1,
            _ => 2,
        }
    }
}

/// Standard normal truncated to `[-2, 2]`, by rejection.
pub fn truncated_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Treatment propensity of the covariate designs: `expit(1ᵀX_t + 2Σ(A_s − ½))`
/// over the lags `s ∈ {t−2, t−1}` with `s ≥ 1`.
pub fn design_propensity(u_t: f64, lag1: Option<bool>, lag2: Option<bool>) -> f64 {
    let term = |a: Option<bool>| a.map_or(0.0, |a| if a { 0.5 } else { -0.5 });
    expit(u_t + 2.0 * (term(lag1) + term(lag2)))
}

/// Mean outcome `10 + A_t + A_{t−1} + |u_t + u_{t−1}|` of the covariate designs.
pub fn design_outcome_mean(a_t: bool, a_prev: bool, u_t: f64, u_prev: f64) -> f64 {
    10.0 + f64::from(u8::from(a_t)) + f64::from(u8::from(a_prev)) + (u_t + u_prev).abs()
}

/// How treatment is assigned when drawing a path.
#[derive(Clone, Copy)]
pub(crate) enum Assignment {
    Observed,
    Shifted(f64),
}

pub(crate) struct PathDraw {
    pub x: Vec<Vec<f64>>,
    pub a: Vec<bool>,
    /// `R_2, ..., R_{len+1}`; dropout stops the path.
    pub retained_next: Vec<bool>,
    pub y: Option<f64>,
}

/// Draw one subject through `horizon`. With `dropout` false the path is
/// always complete and `y` is `Y_horizon`.
pub(crate) fn draw_path(kind: DgpKind, horizon: usize, rng: &mut ChaCha8Rng, assign: Assignment, dropout: bool) -> PathDraw {
    let treat = |pi: f64, rng: &mut ChaCha8Rng| -> bool {
        let p = match assign {
            Assignment::Observed => pi,
            Assignment::Shifted(delta) => shifted(pi, delta),
        };
        rng.random::<f64>() < p
    };
    let mut x = Vec::with_capacity(horizon);
    let mut a: Vec<bool> = Vec::with_capacity(horizon);
    let mut retained_next = Vec::with_capacity(horizon);
    match kind {
        DgpKind::Trial { p } => {
            for _ in 0..horizon {
                let z: f64 = StandardNormal.sample(rng);
                x.push(vec![z]);
                a.push(treat(p, rng));
                retained_next.push(true);
            }
            let k = a.iter().filter(|&&v| v).count() as f64;
            let y = 10.0 + k.sqrt() + truncated_standard_normal(rng);
            PathDraw {
                x,
                a,
                retained_next,
                y: Some(y),
            }
        }
        DgpKind::DropoutSim { .. } | DgpKind::Observational => {
            let c0 = match kind {
                DgpKind::DropoutSim { u_l } if dropout => Some(u_l + (5.0 - u_l) * rng.random::<f64>()),
                _ => None,
            };
            let mut u = Vec::with_capacity(horizon);
            let mut cum = 0.0;
            for t in 0..horizon {
                let x1: f64 = StandardNormal.sample(rng);
                let x2: f64 = StandardNormal.sample(rng);
                let u_t = x1 + x2;
                let lag1 = t.checked_sub(1).map(|s| a[s]);
                let lag2 = t.checked_sub(2).map(|s| a[s]);
                let at = treat(design_propensity(u_t, lag1, lag2), rng);
                x.push(vec![x1, x2]);
                u.push(u_t);
                a.push(at);
                cum += f64::from(u8::from(at));
                let stay = match c0 {
                    Some(c) => rng.random::<f64>() < expit(c + cum),
                    None => true,
                };
                retained_next.push(stay);
                if !stay {
                    return PathDraw {
                        x,
                        a,
                        retained_next,
                        y: None,
                    };
                }
            }
            let t = horizon - 1;
            let (a_prev, u_prev) = if t == 0 { (false, 0.0) } else { (a[t - 1], u[t - 1]) };
            let mean = design_outcome_mean(a[t], a_prev, u[t], u_prev);
            let noise: f64 = StandardNormal.sample(rng);
            PathDraw {
                x,
                a,
                retained_next,
                y: Some(mean + noise),
            }
        }
    }
}

/// Draw a panel; subject `i` uses random stream `(seed, i)`.
pub fn simulate(cfg: &DgpConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let horizon = cfg.horizon;
    let trajectories = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut gen = rng::stream(cfg.seed, i as u64);
            let path = draw_path(cfg.kind, horizon, &mut gen, Assignment::Observed, true);
            let observed = path.a.len();
            let mut covariates = vec![None; horizon];
            let mut treatments = vec![None; horizon];
            let mut retention = vec![false; horizon + 1];
            retention[0] = true;
            for t in 0..observed {
                covariates[t] = Some(path.x[t].clone());
                treatments[t] = Some(path.a[t]);
                retention[t + 1] = path.retained_next[t];
            }
            let mut outcomes = vec![None; horizon];
            if retention[horizon] {
                outcomes[horizon - 1] = path.y;
            }
            Trajectory::new(format!("{}", i + 1), covariates, treatments, outcomes, retention)
        })
        .collect::<Result<Vec<_>>>()?;
    PanelDataset::new(trajectories)
}
