//! Variance estimates, pointwise intervals and multiplier-bootstrap
//! uniform bands over the `δ` grid.

use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::EifMatrix;
use crate::fmt_f64;
use crate::intervention::DeltaGrid;
use crate::rng;

/// `σ̂(δ) = sqrt(ℙ_n[(φ − ψ̂)²])` per column.
pub fn estimate_variance(eif: &EifMatrix, psi: &[f64]) -> Result<Vec<f64>> {
    let n = eif.n();
    if n < 2 {
        return Err(Error::Precondition(format!("variance needs n >= 2, got {n}")));
    }
    if psi.len() != eif.columns().len() {
        return Err(Error::Invariant("psi length differs from grid".into()));
    }
    Ok(eif
        .columns()
        .iter()
        .zip(psi)
        .map(|(col, &p)| (col.iter().map(|v| (v - p) * (v - p)).sum::<f64>() / n as f64).sqrt())
        .collect())
}

/// `z_{1−α/2}`.
pub fn normal_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// `ψ̂ ± z_{1−α/2} σ̂/√n`.
pub fn pointwise_interval(psi: &[f64], sigma: &[f64], n: usize, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = normal_critical(alpha)?;
    Ok(scaled_interval(psi, sigma, n, z))
}

fn scaled_interval(psi: &[f64], sigma: &[f64], n: usize, crit: f64) -> (Vec<f64>, Vec<f64>) {
    let root = (n as f64).sqrt();
    psi.iter()
        .zip(sigma)
        .map(|(p, s)| (p - crit * s / root, p + crit * s / root))
        .unzip()
}

/// One horizon's contribution to a bootstrap sup.
#[derive(Debug, Clone, Copy)]
pub struct BandInput<'a> {
    pub eif: &'a EifMatrix,
    pub psi: &'a [f64],
    pub sigma: &'a [f64],
}

/// Sup statistics `S_b`, `b = 0..B`, over every column with `σ̂ > 0` of
/// every input. All inputs must index the same subjects in the same order.
/// Replicate `b` draws its Rademacher multipliers from stream `(seed, b)`.
pub fn bootstrap_sup_statistics(inputs: &[BandInput<'_>], b: usize, seed: u64) -> Result<Vec<f64>> {
    let n = inputs.first().map_or(0, |i| i.eif.n());
    if n < 2 {
        return Err(Error::Precondition("bootstrap needs n >= 2".into()));
    }
    let mut centered: Vec<(Vec<f64>, f64)> = Vec::new();
    for inp in inputs {
        if inp.eif.n() != n {
            return Err(Error::Invariant("pooled influence matrices differ in n".into()));
        }
        for (d, col) in inp.eif.columns().iter().enumerate() {
            if inp.sigma[d] > 0.0 {
                let scale = 1.0 / ((n as f64).sqrt() * inp.sigma[d]);
                centered.push((col.iter().map(|v| v - inp.psi[d]).collect(), scale));
            }
        }
    }
    let stats = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut gen = rng::stream(seed, rep as u64);
            let mut signs = Vec::with_capacity(n);
            let mut bits = 0u64;
            for i in 0..n {
                if i % 64 == 0 {
                    bits = gen.next_u64();
                }
                signs.push(if bits & 1 == 1 { 1.0 } else { -1.0 });
                bits >>= 1;
            }
            centered
                .iter()
                .map(|(col, scale)| {
                    let s: f64 = col.iter().zip(&signs).map(|(c, x)| c * x).sum();
                    s.abs() * scale
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(stats)
}

/// `max(q_{1−α}, z_{1−α/2})` where `q_{1−α}` is the order statistic at
/// index `⌈(1−α)B⌉ − 1` of the sup statistics.
pub fn critical_value(stats: &[f64], alpha: f64) -> Result<f64> {
    let z = normal_critical(alpha)?;
    if stats.is_empty() {
        return Ok(z);
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    Ok(sorted[idx].max(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub alpha: f64,
    pub grid: DeltaGrid,
    pub psi_hat: Vec<f64>,
    pub pw_lo: Vec<f64>,
    pub pw_hi: Vec<f64>,
    pub unif_lo: Vec<f64>,
    pub unif_hi: Vec<f64>,
    pub z: f64,
    pub c_alpha: f64,
    /// Bootstrap replicates.
    pub b: usize,
    pub seed: u64,
    /// Grid values left out of the sup because `σ̂ = 0`.
    pub excluded_deltas: Vec<f64>,
}

impl ConfidenceBand {
    /// CSV with columns `delta, psi_hat, pw_lo, pw_hi, unif_lo, unif_hi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "delta,psi_hat,pw_lo,pw_hi,unif_lo,unif_hi")?;
        for (d, delta) in self.grid.values().iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_f64(*delta),
                fmt_f64(self.psi_hat[d]),
                fmt_f64(self.pw_lo[d]),
                fmt_f64(self.pw_hi[d]),
                fmt_f64(self.unif_lo[d]),
                fmt_f64(self.unif_hi[d])
            )?;
        }
        Ok(())
    }
}

fn band_from_stats(inp: BandInput<'_>, stats: &[f64], alpha: f64, b: usize, seed: u64) -> Result<ConfidenceBand> {
    let z = normal_critical(alpha)?;
    let c_alpha = critical_value(stats, alpha)?;
    let n = inp.eif.n();
    let (pw_lo, pw_hi) = scaled_interval(inp.psi, inp.sigma, n, z);
    let (unif_lo, unif_hi) = scaled_interval(inp.psi, inp.sigma, n, c_alpha);
    let excluded_deltas: Vec<f64> = inp
        .eif
        .grid()
        .values()
        .iter()
        .zip(inp.sigma)
        .filter(|(_, s)| **s <= 0.0)
        .map(|(d, _)| *d)
        .collect();
    if !excluded_deltas.is_empty() {
        log::warn!("sigma_hat = 0 at delta {:?}; excluded from the bootstrap sup", excluded_deltas);
    }
    Ok(ConfidenceBand {
        alpha,
        grid: inp.eif.grid().clone(),
        psi_hat: inp.psi.to_vec(),
        pw_lo,
        pw_hi,
        unif_lo,
        unif_hi,
        z,
        c_alpha,
        b,
        seed,
        excluded_deltas,
    })
}

/// Pointwise and uniform bands at level `1 − α`.
pub fn uniform_band(eif: &EifMatrix, psi: &[f64], sigma: &[f64], alpha: f64, b: usize, seed: u64) -> Result<ConfidenceBand> {
    if b < 100 {
        return Err(Error::Config(format!("bootstrap needs B >= 100, got {b}")));
    }
    normal_critical(alpha)?;
    let inp = BandInput { eif, psi, sigma };
    let stats = bootstrap_sup_statistics(&[inp], b, seed)?;
    band_from_stats(inp, &stats, alpha, b, seed)
}

/// Bands whose critical value is a sup over every horizon and grid value
/// jointly; one band is returned per input.
pub fn uniform_band_pooled(inputs: &[BandInput<'_>], alpha: f64, b: usize, seed: u64) -> Result<Vec<ConfidenceBand>> {
    if b < 100 {
        return Err(Error::Config(format!("bootstrap needs B >= 100, got {b}")));
    }
    normal_critical(alpha)?;
    let stats = bootstrap_sup_statistics(inputs, b, seed)?;
    inputs.iter().map(|&inp| band_from_stats(inp, &stats, alpha, b, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn matrix(cols: Vec<Vec<f64>>) -> EifMatrix {
        let n = cols[0].len();
        let grid = DeltaGrid::new((1..=cols.len()).map(|d| d as f64).collect()).unwrap();
        EifMatrix::new(cols, 1, grid, vec![0; n], 1).unwrap()
    }

    #[test]
    fn variance_examples() {
        let m = matrix(vec![vec![0.0, 2.0], vec![3.0, 3.0]]);
        let s = estimate_variance(&m, &[1.0, 3.0]).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
        let m = matrix(vec![vec![1.0]]);
        assert!(estimate_variance(&m, &[1.0]).is_err());
    }

    #[test]
    fn pointwise_half_width() {
        let (lo, hi) = pointwise_interval(&[0.0], &[1.0], 100, 0.05).unwrap();
        assert_abs_diff_eq!(hi[0], 0.195996, epsilon = 1e-6);
        assert_abs_diff_eq!(lo[0], -0.195996, epsilon = 1e-6);
        let (_, h4) = pointwise_interval(&[0.0], &[1.0], 400, 0.05).unwrap();
        assert_abs_diff_eq!(h4[0] * 2.0, hi[0], epsilon = 1e-15);
        let (lo, hi) = pointwise_interval(&[2.0], &[0.0], 100, 0.05).unwrap();
        assert_eq!((lo[0], hi[0]), (2.0, 2.0));
        assert!(pointwise_interval(&[0.0], &[1.0], 10, 1.0).is_err());
    }

    #[test]
    fn quantile_index_rule() {
        let stats: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(critical_value(&stats, 0.05).unwrap(), 95.0);
        let small = vec![0.1; 100];
        assert_eq!(critical_value(&small, 0.05).unwrap(), normal_critical(0.05).unwrap());
    }

    #[test]
    fn band_rejects_small_b() {
        let m = matrix(vec![vec![0.0, 2.0]]);
        assert!(uniform_band(&m, &[1.0], &[1.0], 0.05, 10, 0).is_err());
    }

    #[test]
    fn zero_sigma_is_excluded() {
        let m = matrix(vec![vec![0.0, 2.0, 1.0], vec![3.0, 3.0, 3.0]]);
        let band = uniform_band(&m, &[1.0, 3.0], &estimate_variance(&m, &[1.0, 3.0]).unwrap(), 0.05, 200, 3).unwrap();
        assert_eq!(band.excluded_deltas, vec![2.0]);
        assert_eq!((band.unif_lo[1], band.unif_hi[1]), (3.0, 3.0));
    }
}
