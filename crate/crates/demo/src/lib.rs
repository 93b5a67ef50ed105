//! Browser bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page can stay plain JS.

use ipsi_core::efficiency::{re_curve, MomentSpec, Variant};
use ipsi_core::estimator::estimate_cross_fit;
use ipsi_core::inference::uniform_band;
use ipsi_core::intervention::{incremental_propensity, DeltaGrid, Spacing};
use ipsi_core::simulation::{benchmark_specs, simulate, true_psi_oracle, DgpConfig, DgpKind};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_N: usize = 5000;
const MAX_T: usize = 8;
const MAX_TMAX: usize = 20;

fn to_js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct ShiftCurve {
    pi: Vec<f64>,
    q: Vec<Vec<f64>>,
    deltas: Vec<f64>,
}

/// Shifted propensity `q(π; δ)` on a grid of `π` for each `δ`.
pub fn shift_curve_json(deltas: &[f64], points: usize) -> Result<String, String> {
    if points < 2 || points > 1000 {
        return Err("points must lie in 2..=1000".into());
    }
    let pi: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let q = deltas
        .iter()
        .map(|&d| pi.iter().map(|&p| incremental_propensity(p, d)).collect::<ipsi_core::Result<Vec<_>>>())
        .collect::<ipsi_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&ShiftCurve {
        pi,
        q,
        deltas: deltas.to_vec(),
    })
    .map_err(|e| e.to_string())
}

/// Efficiency bounds and exact ratios for the randomized design.
pub fn bounds_json(delta: f64, p: f64, tmax: usize, never_treated: bool) -> Result<String, String> {
    if tmax == 0 || tmax > MAX_TMAX {
        return Err(format!("tmax must lie in 1..={MAX_TMAX}"));
    }
    let variant = if never_treated {
        Variant::NeverTreated
    } else {
        Variant::AlwaysTreated
    };
    let report = re_curve(|t| MomentSpec::trial(p, delta, t), tmax, variant).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CurveWithBands {
    grid: Vec<f64>,
    psi_hat: Vec<f64>,
    pw_lo: Vec<f64>,
    pw_hi: Vec<f64>,
    unif_lo: Vec<f64>,
    unif_hi: Vec<f64>,
    truth: Vec<f64>,
    dropout: f64,
}

/// Simulate a panel, estimate the effect curve by cross-fitting and
/// attach 95% pointwise and uniform bands plus the Monte Carlo truth.
pub fn simulate_estimate_json(kind: &str, n: usize, horizon: usize, seed: u64) -> Result<String, String> {
    if !(10..=MAX_N).contains(&n) || !(1..=MAX_T).contains(&horizon) {
        return Err(format!("need 10 <= n <= {MAX_N} and 1 <= T <= {MAX_T}"));
    }
    let kind = match kind {
        "dropout" => DgpKind::DropoutSim { u_l: 1.0 },
        "trial" => DgpKind::Trial { p: 0.5 },
        "observational" => DgpKind::Observational,
        other => return Err(format!("unknown design '{other}'")),
    };
    let cfg = DgpConfig { kind, n, horizon, seed };
    let grid = DeltaGrid::spaced(0.2, 5.0, 15, Spacing::Log).map_err(|e| e.to_string())?;
    let run = || -> ipsi_core::Result<CurveWithBands> {
        let ds = simulate(&cfg)?;
        let est = estimate_cross_fit(&ds, 2, seed, &benchmark_specs(), &grid, horizon)?;
        let band = uniform_band(&est.eif, &est.estimate.psi_hat, &est.estimate.sigma_hat, 0.05, 500, seed)?;
        let truth = true_psi_oracle(&cfg, &grid, horizon, 20_000, seed ^ 0x9e37)?;
        Ok(CurveWithBands {
            grid: grid.values().to_vec(),
            psi_hat: band.psi_hat,
            pw_lo: band.pw_lo,
            pw_hi: band.pw_hi,
            unif_lo: band.unif_lo,
            unif_hi: band.unif_hi,
            truth: truth.iter().map(|p| p.psi).collect(),
            dropout: ds.dropout_fraction(horizon),
        })
    };
    let out = run().map_err(|e| e.to_string())?;
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn shift_curve(deltas: Vec<f64>, points: usize) -> Result<String, JsValue> {
    to_js(shift_curve_json(&deltas, points))
}

#[wasm_bindgen]
pub fn efficiency_bounds(delta: f64, p: f64, tmax: usize, never_treated: bool) -> Result<String, JsValue> {
    to_js(bounds_json(delta, p, tmax, never_treated))
}

#[wasm_bindgen]
pub fn simulate_estimate(kind: &str, n: usize, horizon: usize, seed: u64) -> Result<String, JsValue> {
    to_js(simulate_estimate_json(kind, n, horizon, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_curve_endpoints() {
        let v: serde_json::Value = serde_json::from_str(&shift_curve_json(&[0.5, 1.0, 4.0], 11).unwrap()).unwrap();
        assert_eq!(v["q"][1][3], v["pi"][3]);
        assert_eq!(v["q"][2][0], 0.0);
        assert_eq!(v["q"][2][10], 1.0);
        assert!(shift_curve_json(&[-1.0], 5).is_err());
    }

    #[test]
    fn bounds_rows() {
        let v: serde_json::Value = serde_json::from_str(&bounds_json(5.0, 0.5, 6, false).unwrap()).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 6);
        assert!(bounds_json(5.0, 0.5, 50, false).is_err());
    }

    #[test]
    fn simulate_estimate_shapes() {
        let v: serde_json::Value = serde_json::from_str(&simulate_estimate_json("dropout", 300, 2, 1).unwrap()).unwrap();
        let len = v["grid"].as_array().unwrap().len();
        for key in ["psi_hat", "pw_lo", "unif_hi", "truth"] {
            assert_eq!(v[key].as_array().unwrap().len(), len);
        }
        assert!(simulate_estimate_json("other", 300, 2, 1).is_err());
    }
}
