//! Closed-form and quadrature references for the quartic and sine
//! experiment families. Nothing here touches the sampling code.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::quadrature::{integrate_time, GaussianExpectation, GaussianRule, TimeRule};

/// Which factor of the sensitivity to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityKind {
    Drift,
    Vol,
}

/// `E[(x + b·τ + σ√τ Z)⁴]` with `τ = T − t`.
pub fn quartic_v0(t: f64, x: f64, b0: f64, sigma0: f64, horizon: f64) -> f64 {
    let tau = horizon - t;
    let mu = x + b0 * tau;
    let s2 = sigma0 * sigma0 * tau;
    let mu2 = mu * mu;
    mu2 * mu2 + 6.0 * mu2 * s2 + 3.0 * s2 * s2
}

/// `E[sin(T + W_T)] = sin(T)·e^{−T/2}`.
pub fn sine_v0(horizon: f64) -> f64 {
    horizon.sin() * (-0.5 * horizon).exp()
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `(E|X|, E|X|³)` for `X ~ N(mean, sd²)`.
fn folded_moments(mean: f64, sd: f64) -> (f64, f64) {
    if sd == 0.0 {
        let a = mean.abs();
        return (a, a * a * a);
    }
    // partial moments ∫_a^∞ zᵏ φ(z) dz with a = −mean/sd
    let a = -mean / sd;
    let tail = std_normal_cdf(-a);
    let pdf = std_normal_pdf(a);
    let i0 = tail;
    let i1 = pdf;
    let i2 = a * pdf + tail;
    let i3 = (a * a + 2.0) * pdf;
    let pos1 = mean * i0 + sd * i1;
    let pos3 = mean.powi(3) * i0 + 3.0 * mean * mean * sd * i1 + 3.0 * mean * sd * sd * i2 + sd.powi(3) * i3;
    let abs1 = 2.0 * pos1 - mean;
    let abs3 = 2.0 * pos3 - (mean.powi(3) + 3.0 * mean * sd * sd);
    (abs1, abs3)
}

/// Exact sensitivity factors for `f(x) = x⁴` in one dimension, with the
/// inner and outer Gaussian expectations in closed form and the time
/// integral evaluated by `time`.
///
/// With `μ ~ N(x + b(T−t), σ²(s−t))` the integrands are
/// `4 E[|μ|(μ² + 3σ²(T−s))]` (drift) and `12|σ| E[μ² + σ²(T−s)]` (vol).
pub fn quartic_sensitivity(
    t: f64,
    x: f64,
    b0: f64,
    sigma0: f64,
    horizon: f64,
    kind: SensitivityKind,
    time: TimeRule,
) -> Result<f64> {
    if !(t < horizon) {
        return Err(Error::arg("need t < T"));
    }
    let m = x + b0 * (horizon - t);
    let s2 = sigma0 * sigma0;
    integrate_time(time, t, horizon, |s| {
        let var = s2 * (s - t).max(0.0);
        let rest = s2 * (horizon - s);
        match kind {
            SensitivityKind::Drift => {
                let (e1, e3) = folded_moments(m, var.sqrt());
                4.0 * (e3 + 3.0 * rest * e1)
            }
            SensitivityKind::Vol => 12.0 * sigma0.abs() * (m * m + var + rest),
        }
    })
}

/// Quadrature configuration for [`sine_sensitivity_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadConfig {
    pub gaussian: GaussianRule,
    pub time: TimeRule,
}

/// Sensitivity factors of `f(x) = sin(Σxᵢ)` at `(0, 0)` under a normalized
/// baseline in dimension `d`:
///
/// ```text
/// drift: √d ∫₀ᵀ e^{−(T−t)/2} E|cos(T + W_t)| dt
/// vol:   √d ∫₀ᵀ e^{−(T−t)/2} E|sin(T + W_t)| dt
/// ```
///
/// The inner conditional expectation is already reduced to the damping
/// factor `e^{−(T−t)/2}`; the remaining Gaussian expectation is evaluated
/// with `cfg.gaussian`, splitting at the zeros of the integrand.
pub fn sine_sensitivity_quadrature(horizon: f64, d: usize, kind: SensitivityKind, cfg: &QuadConfig) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::arg("horizon must be positive"));
    }
    if d == 0 {
        return Err(Error::arg("dimension must be at least 1"));
    }
    let ge = GaussianExpectation::new(cfg.gaussian)?;
    let half_width = match cfg.gaussian {
        GaussianRule::Piecewise { half_width, .. } => half_width,
        GaussianRule::Hermite { .. } => 0.0,
    };
    let phase = match kind {
        SensitivityKind::Drift => FRAC_PI_2,
        SensitivityKind::Vol => 0.0,
    };
    let trig = move |v: f64| match kind {
        SensitivityKind::Drift => v.cos().abs(),
        SensitivityKind::Vol => v.sin().abs(),
    };
    let integral = integrate_time(cfg.time, 0.0, horizon, |t| {
        let sd = t.sqrt();
        let mut kinks = Vec::new();
        if sd > 0.0 && half_width > 0.0 {
            // zeros of the integrand: T + sd·z = phase + kπ
            let lo = ((horizon - sd * half_width - phase) / PI).floor() as i64;
            let hi = ((horizon + sd * half_width - phase) / PI).ceil() as i64;
            for k in lo..=hi {
                kinks.push((phase + k as f64 * PI - horizon) / sd);
            }
        }
        (-(horizon - t) / 2.0).exp() * ge.expect(|z| trig(horizon + sd * z), &kinks)
    })?;
    Ok((d as f64).sqrt() * integral)
}
