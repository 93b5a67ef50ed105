//! Composite Simpson quadrature for the oracle nuisance computations.

use std::f64::consts::PI;

/// Composite Simpson rule with `intervals` (rounded up to even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2) + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Fixed Simpson nodes and weights for `E[f(U)]`, `U ~ N(0, sd²)`,
/// truncated at ±8 sd.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn new(sd: f64, intervals: usize) -> Self {
        let n = intervals.max(2) + intervals % 2;
        let (a, b) = (-8.0 * sd, 8.0 * sd);
        let h = (b - a) / n as f64;
        let norm = 1.0 / (sd * (2.0 * PI).sqrt());
        let mut nodes = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            nodes.push(x);
            weights.push(w * h / 3.0 * norm * (-0.5 * (x / sd).powi(2)).exp());
        }
        Self { nodes, weights }
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}
