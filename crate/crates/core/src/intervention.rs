//! The incremental intervention: odds of treatment multiplied by `δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(pi: f64, delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be positive and finite, got {delta}")));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::Domain(format!("propensity must lie in [0, 1], got {pi}")));
    }
    Ok(())
}

/// Shifted propensity `q = δπ / (δπ + 1 − π)`.
pub fn incremental_propensity(pi: f64, delta: f64) -> Result<f64> {
    check(pi, delta)?;
    Ok(shifted(pi, delta))
}

/// Unchecked form of [`incremental_propensity`] for hot loops.
#[inline]
pub(crate) fn shifted(pi: f64, delta: f64) -> f64 {
    delta * pi / (delta * pi + 1.0 - pi)
}

/// `dQ/dP = (δa + 1 − a) / (δπ + 1 − π)`.
pub fn density_ratio(a: bool, pi: f64, delta: f64) -> Result<f64> {
    check(pi, delta)?;
    Ok(ratio(a, pi, delta))
}

#[inline]
pub(crate) fn ratio(a: bool, pi: f64, delta: f64) -> f64 {
    let num = if a { delta } else { 1.0 };
    num / (delta * pi + 1.0 - pi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Log,
    Linear,
}

/// Strictly increasing grid of `δ` values on `[δ_l, δ_u] ⊂ (0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DeltaGrid {
    values: Vec<f64>,
}

impl DeltaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("delta grid is empty".into()));
        }
        if values.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Config("delta values must be positive and finite".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("delta values must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// `count` points from `lo` to `hi`, endpoints included exactly.
    pub fn spaced(lo: f64, hi: f64, count: usize, spacing: Spacing) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid delta range [{lo}, {hi}]")));
        }
        if count == 0 || (count == 1 && lo != hi) {
            return Err(Error::Config("grid needs at least two points for a range".into()));
        }
        if count == 1 {
            return Self::new(vec![lo]);
        }
        let last = (count - 1) as f64;
        let mut values: Vec<f64> = (0..count)
            .map(|i| {
                let f = i as f64 / last;
                match spacing {
                    Spacing::Log => (lo.ln() + f * (hi.ln() - lo.ln())).exp(),
                    Spacing::Linear => lo + f * (hi - lo),
                }
            })
            .collect();
        values[0] = lo;
        values[count - 1] = hi;
        Self::new(values)
    }

    pub fn single(delta: f64) -> Result<Self> {
        Self::new(vec![delta])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl TryFrom<Vec<f64>> for DeltaGrid {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DeltaGrid> for Vec<f64> {
    fn from(g: DeltaGrid) -> Self {
        g.values
    }
}

/// 25 log-spaced values on `[0.1, 5]`.
pub fn default_grid() -> DeltaGrid {
    DeltaGrid::spaced(0.1, 5.0, 25, Spacing::Log).expect("static grid is valid")
}
