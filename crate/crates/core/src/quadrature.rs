//! Gauss rules used by the reference oracles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodes and weights of an `n`-point rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss–Legendre rule on `[-1, 1]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> Result<Rule> {
    if n < 2 {
        return Err(Error::arg(format!("Gauss-Legendre order must be >= 2, got {n}")));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Ok(Rule { nodes, weights })
}

/// Probabilists' Gauss–Hermite rule via Golub–Welsch, with weights
/// normalized so that `Σ wᵢ g(zᵢ) ≈ E[g(Z)]`, `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> Result<Rule> {
    if n < 2 {
        return Err(Error::arg(format!("Gauss-Hermite order must be >= 2, got {n}")));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    })
}

/// How a Gaussian expectation `E[g(Z)]` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GaussianRule {
    /// Plain Gauss–Hermite; accurate for smooth integrands only.
    Hermite { order: usize },
    /// Gauss–Legendre on unit panels of `[-half_width, half_width]`, further
    /// split at the integrand's kinks.
    Piecewise { order: usize, half_width: f64 },
}

impl Default for GaussianRule {
    fn default() -> Self {
        GaussianRule::Piecewise {
            order: 16,
            half_width: 10.0,
        }
    }
}

/// How a time integral `∫_a^b g(s) ds` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeRule {
    GaussLegendre { panels: usize, order: usize },
    /// `Σ_{i<N} Δt g(a + iΔt)`, the discretization used by the estimator.
    LeftRiemann { steps: usize },
}

impl Default for TimeRule {
    fn default() -> Self {
        TimeRule::GaussLegendre { panels: 200, order: 4 }
    }
}

/// Precomputed rule for `E[g(Z)]`.
#[derive(Debug, Clone)]
pub struct GaussianExpectation {
    kind: GaussianRule,
    rule: Rule,
}

impl GaussianExpectation {
    pub fn new(kind: GaussianRule) -> Result<Self> {
        let rule = match kind {
            GaussianRule::Hermite { order } => gauss_hermite(order)?,
            GaussianRule::Piecewise { order, half_width } => {
                if !(half_width > 0.0) {
                    return Err(Error::arg("half width must be positive"));
                }
                gauss_legendre(order)?
            }
        };
        Ok(Self { kind, rule })
    }

    /// `E[g(Z)]`; `kinks` lists points in `z` where `g` is not smooth.
    pub fn expect(&self, g: impl Fn(f64) -> f64, kinks: &[f64]) -> f64 {
        match self.kind {
            GaussianRule::Hermite { .. } => self
                .rule
                .nodes
                .iter()
                .zip(&self.rule.weights)
                .map(|(z, w)| w * g(*z))
                .sum(),
            GaussianRule::Piecewise { half_width, .. } => {
                let mut cuts: Vec<f64> = Vec::new();
                let whole = half_width.ceil() as i64;
                for k in -whole..=whole {
                    cuts.push((k as f64).clamp(-half_width, half_width));
                }
                cuts.extend(kinks.iter().copied().filter(|z| z.abs() < half_width));
                cuts.sort_by(f64::total_cmp);
                cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
                let norm = 1.0 / (2.0 * PI).sqrt();
                let mut total = 0.0;
                for w in cuts.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let half = 0.5 * (hi - lo);
                    let mid = 0.5 * (hi + lo);
                    for (x, wt) in self.rule.nodes.iter().zip(&self.rule.weights) {
                        let z = mid + half * x;
                        total += half * wt * g(z) * norm * (-0.5 * z * z).exp();
                    }
                }
                total
            }
        }
    }
}

/// Evaluates `∫_a^b g(s) ds` with `rule`.
pub fn integrate_time(rule: TimeRule, a: f64, b: f64, g: impl Fn(f64) -> f64) -> Result<f64> {
    match rule {
        TimeRule::GaussLegendre { panels, order } => {
            if panels == 0 {
                return Err(Error::arg("need at least one time panel"));
            }
            let gl = gauss_legendre(order)?;
            let width = (b - a) / panels as f64;
            let mut total = 0.0;
            for p in 0..panels {
                let lo = a + p as f64 * width;
                let mid = lo + 0.5 * width;
                for (x, w) in gl.nodes.iter().zip(&gl.weights) {
                    total += 0.5 * width * w * g(mid + 0.5 * width * x);
                }
            }
            Ok(total)
        }
        TimeRule::LeftRiemann { steps } => {
            if steps == 0 {
                return Err(Error::arg("need at least one time step"));
            }
            let dt = (b - a) / steps as f64;
            Ok((0..steps).map(|i| dt * g(a + i as f64 * dt)).sum())
        }
    }
}
