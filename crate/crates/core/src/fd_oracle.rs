//! Explicit finite-difference solver for the one-dimensional robust
//! equation with a convex terminal condition:
//!
//! ```text
//! ∂_t v + ½(σ + ηε)² ∂_xx v + b ∂_x v + γε |∂_x v| = 0,   v(T, ·) = f
//! ```
//!
//! The supremum over drift perturbations `|b̃| ≤ γε` of `b̃ ∂_x v` is taken in
//! closed form as `γε |∂_x v|`. For convex `f` the solution stays convex, so
//! the supremum over the volatility ball sits at `σ + ηε`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::boundary::Boundary;
use crate::error::{Error, Result};

/// Discretization of the first-order terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvectionScheme {
    /// Central when the cell Péclet condition `(|b| + γε)Δx ≤ σ_eff²` holds,
    /// upwind otherwise.
    #[default]
    Auto,
    /// Second-order central differences; monotone only under the Péclet
    /// condition, which is enforced.
    Central,
    /// First-order upwinding on the sign of each candidate total drift
    /// `b ± γε`.
    Upwind,
}

/// Problem definition for [`solve`].
#[derive(Clone)]
pub struct FdProblem1d {
    pub b0: f64,
    pub sigma0: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub boundary: Arc<dyn Boundary>,
    /// Evaluation point used by sweeps and for the default domain size.
    pub t: f64,
    pub x: f64,
    /// Domain `[-L, L]`; default `|x| + 8σ_eff√T + (|b| + γε)T`.
    pub half_width: Option<f64>,
    pub nx: usize,
    /// Number of time steps; default from the stability bound and `safety`.
    pub nt: Option<usize>,
    pub safety: f64,
    pub scheme: AdvectionScheme,
    /// Accept terminal conditions not declared convex when `ηε > 0`.
    pub allow_nonconvex: bool,
    /// Approximate number of time levels kept in the solution.
    pub stored_levels: usize,
}

impl std::fmt::Debug for FdProblem1d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FdProblem1d")
            .field("b0", &self.b0)
            .field("sigma0", &self.sigma0)
            .field("gamma", &self.gamma)
            .field("eta", &self.eta)
            .field("epsilon", &self.epsilon)
            .field("horizon", &self.horizon)
            .field("boundary", &self.boundary.name())
            .field("nx", &self.nx)
            .field("nt", &self.nt)
            .field("scheme", &self.scheme)
            .finish()
    }
}

impl FdProblem1d {
    /// Baseline problem (`ε = 0`) with default numerics.
    pub fn new(b0: f64, sigma0: f64, horizon: f64, boundary: Arc<dyn Boundary>) -> Self {
        Self {
            b0,
            sigma0,
            gamma: 0.0,
            eta: 0.0,
            epsilon: 0.0,
            horizon,
            boundary,
            t: 0.0,
            x: 0.0,
            half_width: None,
            nx: 2001,
            nt: None,
            safety: 0.9,
            scheme: AdvectionScheme::Auto,
            allow_nonconvex: false,
            stored_levels: 100,
        }
    }

    pub fn with_uncertainty(mut self, gamma: f64, eta: f64, epsilon: f64) -> Self {
        self.gamma = gamma;
        self.eta = eta;
        self.epsilon = epsilon;
        self
    }

    pub fn effective_sigma(&self) -> f64 {
        self.sigma0 + self.eta * self.epsilon
    }

    pub fn drift_radius(&self) -> f64 {
        self.gamma * self.epsilon
    }

    pub fn domain_half_width(&self) -> f64 {
        self.half_width.unwrap_or_else(|| {
            self.x.abs()
                + 8.0 * self.effective_sigma() * self.horizon.sqrt()
                + (self.b0.abs() + self.drift_radius()) * self.horizon
        })
    }

    /// Largest stable time step on spatial step `dx`.
    pub fn max_stable_dt(&self, dx: f64) -> f64 {
        let s = self.effective_sigma();
        dx * dx / (s * s + self.b0.abs() * dx + self.drift_radius() * dx)
    }

    fn validate(&self) -> Result<()> {
        if self.boundary.dim() != 1 {
            return Err(Error::arg("finite-difference oracle is one-dimensional"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::arg("sigma0 must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::arg("horizon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.eta) || !(self.epsilon >= 0.0) {
            return Err(Error::arg("need gamma, eta in [0, 1] and epsilon >= 0"));
        }
        if !(0.0..self.horizon).contains(&self.t) {
            return Err(Error::arg("evaluation time must lie in [0, T)"));
        }
        if self.nx < 3 {
            return Err(Error::arg("need at least 3 spatial points"));
        }
        if !(self.domain_half_width() > 0.0) {
            return Err(Error::arg("domain half width must be positive"));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::arg("safety factor must lie in (0, 1]"));
        }
        if self.eta * self.epsilon > 0.0 && !self.boundary.is_convex() && !self.allow_nonconvex {
            return Err(Error::arg(format!(
                "terminal condition '{}' is not declared convex; the reduced equation is only valid for convex data",
                self.boundary.name()
            )));
        }
        Ok(())
    }
}

/// Stored time levels of a solve.
#[derive(Debug, Clone)]
pub struct FdSolution1d {
    pub grid_x: Vec<f64>,
    /// Ascending; first entry 0, last entry `T`.
    pub grid_t: Vec<f64>,
    /// `grid_t.len() × grid_x.len()`, row-major.
    pub values: Vec<f64>,
    pub dt: f64,
    pub nt: usize,
    pub scheme: AdvectionScheme,
}

impl FdSolution1d {
    pub fn row(&self, k: usize) -> &[f64] {
        let nx = self.grid_x.len();
        &self.values[k * nx..(k + 1) * nx]
    }

    /// Terminal row, `f` on the grid.
    pub fn terminal(&self) -> &[f64] {
        self.row(self.grid_t.len() - 1)
    }

    fn interp_x(&self, k: usize, x: f64) -> f64 {
        let gx = &self.grid_x;
        let n = gx.len();
        let dx = gx[1] - gx[0];
        let pos = ((x - gx[0]) / dx).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let w = pos - i as f64;
        let row = self.row(k);
        row[i] * (1.0 - w) + row[i + 1] * w
    }

    /// Bilinear interpolation between stored levels.
    pub fn at(&self, t: f64, x: f64) -> Result<f64> {
        let (lo_x, hi_x) = (self.grid_x[0], *self.grid_x.last().unwrap());
        let (lo_t, hi_t) = (self.grid_t[0], *self.grid_t.last().unwrap());
        if !(lo_x..=hi_x).contains(&x) || !(lo_t..=hi_t).contains(&t) {
            return Err(Error::arg(format!("({t}, {x}) lies outside the solved domain")));
        }
        let k = self.grid_t.partition_point(|&s| s <= t).saturating_sub(1);
        if k + 1 >= self.grid_t.len() || self.grid_t[k] == t {
            return Ok(self.interp_x(k, x));
        }
        let w = (t - self.grid_t[k]) / (self.grid_t[k + 1] - self.grid_t[k]);
        Ok(self.interp_x(k, x) * (1.0 - w) + self.interp_x(k + 1, x) * w)
    }
}

/// Marches the explicit scheme backward from `T` to 0.
pub fn solve(problem: &FdProblem1d) -> Result<FdSolution1d> {
    problem.validate()?;
    let nx = problem.nx;
    let half = problem.domain_half_width();
    let dx = 2.0 * half / (nx - 1) as f64;
    let grid_x: Vec<f64> = (0..nx)
        .map(|i| if i == nx - 1 { half } else { -half + i as f64 * dx })
        .collect();

    let sigma = problem.effective_sigma();
    let radius = problem.drift_radius();
    let b0 = problem.b0;
    let max_dt = problem.max_stable_dt(dx);
    let horizon = problem.horizon;
    let nt = match problem.nt {
        Some(0) => return Err(Error::arg("need at least one time step")),
        Some(nt) => {
            let dt = horizon / nt as f64;
            if dt > max_dt {
                return Err(Error::Unstable { dt, max_dt });
            }
            nt
        }
        None => (horizon / (problem.safety * max_dt)).ceil() as usize,
    };
    let dt = horizon / nt as f64;

    let peclet_ok = (b0.abs() + radius) * dx <= sigma * sigma;
    let scheme = match problem.scheme {
        AdvectionScheme::Auto if peclet_ok => AdvectionScheme::Central,
        AdvectionScheme::Auto => AdvectionScheme::Upwind,
        AdvectionScheme::Central if !peclet_ok => {
            return Err(Error::arg(format!(
                "central differences are not monotone here: (|b| + γε)Δx = {:e} > σ_eff² = {:e}",
                (b0.abs() + radius) * dx,
                sigma * sigma
            )))
        }
        s => s,
    };

    let f = &problem.boundary;
    let mut v: Vec<f64> = grid_x.iter().map(|&x| f.value(&[x])).collect();
    if let Some(i) = v.iter().position(|y| !y.is_finite()) {
        return Err(Error::non_finite("terminal value", format!("x = {}", grid_x[i])));
    }
    let left = v[0];
    let right = v[nx - 1];
    let mut next = v.clone();

    let stride = nt.div_ceil(problem.stored_levels.max(1)).max(1);
    let mut stored: Vec<(usize, Vec<f64>)> = vec![(nt, v.clone())];

    let diff = 0.5 * sigma * sigma / (dx * dx);
    let inv_dx = 1.0 / dx;
    let half_inv_dx = 0.5 / dx;
    let candidates = [b0 - radius, b0 + radius];

    for n in (0..nt).rev() {
        for i in 1..nx - 1 {
            let (vl, vc, vr) = (v[i - 1], v[i], v[i + 1]);
            let hamiltonian = match scheme {
                AdvectionScheme::Upwind => {
                    let fwd = (vr - vc) * inv_dx;
                    let bwd = (vc - vl) * inv_dx;
                    candidates
                        .iter()
                        .map(|&c| if c > 0.0 { c * fwd } else { c * bwd })
                        .fold(f64::NEG_INFINITY, f64::max)
                }
                _ => {
                    let p = (vr - vl) * half_inv_dx;
                    b0 * p + radius * p.abs()
                }
            };
            next[i] = vc + dt * (diff * (vr - 2.0 * vc + vl) + hamiltonian);
        }
        next[0] = left;
        next[nx - 1] = right;
        std::mem::swap(&mut v, &mut next);
        if v.iter().any(|y| !y.is_finite()) {
            return Err(Error::non_finite("solution", format!("time index {n}")));
        }
        if n % stride == 0 {
            stored.push((n, v.clone()));
        }
    }

    stored.reverse();
    let grid_t: Vec<f64> = stored
        .iter()
        .map(|(n, _)| if *n == nt { horizon } else { *n as f64 * dt })
        .collect();
    let values = stored.into_iter().flat_map(|(_, row)| row).collect();
    Ok(FdSolution1d {
        grid_x,
        grid_t,
        values,
        dt,
        nt,
        scheme,
    })
}

/// One line of an ε sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub v_fd: f64,
    pub approx: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `ln |error|` against `ln ε`; `None` when some
    /// error vanishes.
    pub slope: Option<f64>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Some(sxy / sxx)
}

/// Solves the template at each radius and compares `v_fd^ε(t, x)` with the
/// supplied first-order approximations.
pub fn epsilon_sweep(template: &FdProblem1d, epsilons: &[f64], approx: &[f64]) -> Result<SweepTable> {
    if epsilons.len() < 3 {
        return Err(Error::arg("an epsilon sweep needs at least 3 points"));
    }
    if approx.len() != epsilons.len() {
        return Err(Error::arg("one approximation value per epsilon is required"));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) || epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("epsilons must be positive and strictly increasing"));
    }
    let bound = template.sigma0.abs().min(1.0);
    if let Some(e) = epsilons.iter().find(|e| **e >= bound) {
        return Err(Error::arg(format!("epsilon {e} is not below the expansion bound {bound}")));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for (&eps, &a) in epsilons.iter().zip(approx) {
        let problem = FdProblem1d {
            epsilon: eps,
            ..template.clone()
        };
        let v_fd = solve(&problem)?.at(problem.t, problem.x)?;
        rows.push(SweepRow {
            epsilon: eps,
            v_fd,
            approx: a,
            abs_error: (v_fd - a).abs(),
        });
    }
    let errors: Vec<f64> = rows.iter().map(|r| r.abs_error).collect();
    let slope = log_log_slope(epsilons, &errors);
    Ok(SweepTable { rows, slope })
}
