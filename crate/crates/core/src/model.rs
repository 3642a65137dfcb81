//! Problem definition: baseline coefficients, the uncertainty ball and the
//! evaluation point.
//!
//! The baseline diffusion is `X_s = b·s + σ·W_s` with constant drift `b` and
//! volatility `σ`. The uncertainty ball admits every `(b', σ')` with
//! `|b' − b| ≤ γε` (Euclidean) and `‖σ' − σ‖_F ≤ ηε` (Frobenius).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of redraws in [`generate_normalized_model`].
pub const GENERATION_ATTEMPTS: usize = 100;

/// Relative threshold (w.r.t. `‖σ‖_F`) below which `σ` counts as singular.
pub const SINGULARITY_TOL: f64 = 1e-12;

/// Constant-coefficient baseline diffusion on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    drift: Vec<f64>,
    /// Row-major `d × d`.
    vol: Vec<f64>,
    horizon: f64,
}

impl BaselineModel {
    /// Builds a model from a drift vector and a row-major volatility matrix.
    ///
    /// Rejects non-finite entries, shape mismatches, `horizon <= 0` and a
    /// numerically singular volatility.
    pub fn new(drift: Vec<f64>, vol: Vec<f64>, horizon: f64) -> Result<Self> {
        let d = drift.len();
        if d == 0 {
            return Err(Error::Validation("drift must have at least one component".into()));
        }
        if vol.len() != d * d {
            return Err(Error::Validation(format!(
                "vol has {} entries, expected {} for d = {d}",
                vol.len(),
                d * d
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Validation(format!("horizon must be finite and > 0, got {horizon}")));
        }
        let lmin = lambda_min_of(&vol, d)?;
        let fro = frobenius(&vol);
        if !(lmin > SINGULARITY_TOL * fro) {
            return Err(Error::Validation(format!(
                "vol is singular (smallest singular value {lmin:e})"
            )));
        }
        if drift.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("drift contains non-finite entries".into()));
        }
        Ok(Self { drift, vol, horizon })
    }

    /// Same coefficients on a different horizon.
    pub fn with_horizon(self, horizon: f64) -> Result<Self> {
        Self::new(self.drift, self.vol, horizon)
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    /// Row-major volatility matrix.
    pub fn vol(&self) -> &[f64] {
        &self.vol
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn vol_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.vol)
    }

    /// Smallest singular value of the volatility.
    pub fn lambda_min(&self) -> f64 {
        // entries were validated as finite at construction
        lambda_min_of(&self.vol, self.dim()).expect("validated volatility")
    }
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Smallest singular value of a row-major `d × d` matrix.
pub fn lambda_min_of(vol: &[f64], d: usize) -> Result<f64> {
    if vol.len() != d * d || d == 0 {
        return Err(Error::Validation(format!("expected a {d}x{d} matrix")));
    }
    if vol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("matrix contains non-finite entries".into()));
    }
    let m = DMatrix::from_row_slice(d, d, vol);
    let sv = m.singular_values();
    Ok(sv.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Smallest singular value of the model volatility.
pub fn lambda_min(model: &BaselineModel) -> f64 {
    model.lambda_min()
}

/// Weights and radius of the uncertainty ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
}

impl UncertaintySpec {
    pub fn new(gamma: f64, eta: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Validation(format!("eta must lie in [0, 1], got {eta}")));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::Validation(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(Self { gamma, eta, epsilon })
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        Self::new(self.gamma, self.eta, epsilon)
    }
}

/// Verdict of [`validate_expansion_regime`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub valid: bool,
    /// `min(1, λ_min(σ))`; the radius must stay strictly below it.
    pub bound: f64,
    pub epsilon: f64,
}

/// Checks that the radius lies in the range where the first-order expansion
/// comes with a uniform `O(ε²)` remainder: `ε < min(1, λ_min(σ))`.
pub fn validate_expansion_regime(model: &BaselineModel, unc: &UncertaintySpec) -> RegimeReport {
    let bound = model.lambda_min().min(1.0);
    RegimeReport {
        valid: unc.epsilon < bound,
        bound,
        epsilon: unc.epsilon,
    }
}

/// Point `(t, x)` with `0 ≤ t < T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl EvalPoint {
    pub fn new(t: f64, x: Vec<f64>, model: &BaselineModel) -> Result<Self> {
        if !(t.is_finite() && t >= 0.0 && t < model.horizon()) {
            return Err(Error::Validation(format!(
                "t must lie in [0, {}), got {t}",
                model.horizon()
            )));
        }
        if x.len() != model.dim() {
            return Err(Error::Validation(format!(
                "x has dimension {}, model has {}",
                x.len(),
                model.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("x contains non-finite entries".into()));
        }
        Ok(Self { t, x })
    }

    /// `(0, 0)` in the model's dimension.
    pub fn origin(model: &BaselineModel) -> Self {
        Self {
            t: 0.0,
            x: vec![0.0; model.dim()],
        }
    }
}

/// Random baseline with `Σᵢ bᵢ = 1` and `Σₗ (Σₖ σₖₗ)² = 1`, on horizon 1.
///
/// `b = b̃ / Σ|b̃ᵢ|` with `b̃ᵢ ~ U[0,1]` and `σ = σ̃ / (Σₗ(Σₖ σ̃ₖₗ)²)^{1/2}` with
/// `σ̃ₖₗ ~ U[−1,1]`. Under this normalization `Σᵢ Xⁱ_s` has the law of
/// `s + W_s` for a scalar Brownian motion, whatever the dimension.
pub fn generate_normalized_model(d: usize, seed: u64) -> Result<BaselineModel> {
    if d == 0 {
        return Err(Error::arg("dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GENERATION_ATTEMPTS {
        let raw_b: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..=1.0)).collect();
        let raw_s: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..=1.0)).collect();

        let b_norm: f64 = raw_b.iter().map(|v| v.abs()).sum();
        let s_norm = column_sum_norm(&raw_s, d);
        if !(b_norm > 0.0 && s_norm > 0.0) {
            continue;
        }
        let drift: Vec<f64> = raw_b.iter().map(|v| v / b_norm).collect();
        let vol: Vec<f64> = raw_s.iter().map(|v| v / s_norm).collect();
        match BaselineModel::new(drift, vol, 1.0) {
            Ok(m) => return Ok(m),
            Err(_) => continue,
        }
    }
    Err(Error::Generation {
        attempts: GENERATION_ATTEMPTS,
    })
}

/// `(Σₗ (Σₖ σₖₗ)²)^{1/2}`, the Euclidean norm of `σᵀ1`.
pub fn column_sum_norm(vol: &[f64], d: usize) -> f64 {
    (0..d)
        .map(|l| {
            let c: f64 = (0..d).map(|k| vol[k * d + l]).sum();
            c * c
        })
        .sum::<f64>()
        .sqrt()
}
