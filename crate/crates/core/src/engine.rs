//! Monte Carlo estimators for the baseline value `v⁰(t, x)` and its
//! first-order sensitivity `∂_ε v⁰(t, x)`.
//!
//! The sensitivity is
//!
//! ```text
//! ∂_ε v⁰ = E[ ∫_t^T γ |w(s, x + X_s)| + η ‖J_x w(s, x + X_s) σ‖_F ds ]
//! w(s, y)    = E[ ∇f(y + X̃_{T−s}) ]
//! J_x w(s, y) = E[ D²f(y + X̃_{T−s}) ]
//! ```
//!
//! and both inner expectations are replaced by averages over the `M₁` inner
//! samples, the outer one by an average over `M₁` outer samples, and the time
//! integral by a left Riemann sum on the `N` grid intervals. The drift and
//! volatility parts are reported separately; the `(γ, η)` weighting is a
//! linear combination applied afterwards.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::Boundary;
use crate::error::{Error, Result};
use crate::model::{validate_expansion_regime, BaselineModel, EvalPoint, UncertaintySpec};
use crate::numeric::{mean_std, pairwise_sum, CompensatedSum};
use crate::sampling::{SampleGrid, SamplingOptions, TimeGrid, CHUNK};

/// Outer samples per work unit in the nested estimator.
const NESTED_CHUNK: usize = 32;

/// Difference quotient used for `J_x w` when no Hessian is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difference {
    #[default]
    Forward,
    Central,
}

/// Knobs of [`sensitivity_mc`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensitivityOptions {
    /// Bump size for the finite-difference Jacobian; defaults to
    /// `1e-3 · max(1, |x|_∞)`.
    pub h: Option<f64>,
    /// Use finite differences even when the boundary has a Hessian.
    pub force_fd: bool,
    pub difference: Difference,
}

/// The two γ/η-free factors of the sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub sens_drift: f64,
    pub sens_vol: f64,
    pub used_hessian_path: bool,
}

impl Sensitivity {
    pub fn total(&self, gamma: f64, eta: f64) -> f64 {
        gamma * self.sens_drift + eta * self.sens_vol
    }
}

/// Default finite-difference step at `x`.
pub fn default_h(x: &[f64]) -> f64 {
    1e-3 * x.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

fn check_inputs(model: &BaselineModel, boundary: &dyn Boundary, point: &EvalPoint, samples: &SampleGrid) -> Result<()> {
    let d = model.dim();
    if boundary.dim() != d || point.x.len() != d || samples.dim() != d {
        return Err(Error::arg(format!(
            "dimension mismatch: model {d}, boundary {}, point {}, samples {}",
            boundary.dim(),
            point.x.len(),
            samples.dim()
        )));
    }
    let grid = samples.grid();
    if grid.t_start() != point.t {
        return Err(Error::arg(format!(
            "samples were drawn for t = {}, evaluation point has t = {}",
            grid.t_start(),
            point.t
        )));
    }
    if (grid.t_end() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(Error::arg("samples were drawn for a different horizon"));
    }
    Ok(())
}

/// `(1/M₀) Σⱼ f(x + 𝒳_N(j))`.
pub fn v0_mc(model: &BaselineModel, boundary: &dyn Boundary, point: &EvalPoint, samples: &SampleGrid) -> Result<f64> {
    check_inputs(model, boundary, point, samples)?;
    let d = model.dim();
    let m0 = samples.m0();
    let n_chunks = m0.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut disp = vec![0.0; d];
            let mut y = vec![0.0; d];
            let mut acc = CompensatedSum::default();
            for j in c * CHUNK..((c + 1) * CHUNK).min(m0) {
                samples.terminal_displacement(j, &mut disp);
                for ((yk, xk), dk) in y.iter_mut().zip(&point.x).zip(&disp) {
                    *yk = xk + dk;
                }
                let v = boundary.value(&y);
                if !v.is_finite() {
                    return Err(Error::non_finite("boundary value", format!("sample {j}")));
                }
                acc.add(v);
            }
            Ok(acc.value())
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&partials) / m0 as f64)
}

/// Nested estimate of the drift and volatility factors of `∂_ε v⁰`.
pub fn sensitivity_mc(
    model: &BaselineModel,
    boundary: &dyn Boundary,
    point: &EvalPoint,
    samples: &SampleGrid,
    opts: SensitivityOptions,
) -> Result<Sensitivity> {
    check_inputs(model, boundary, point, samples)?;
    let d = model.dim();
    let n = samples.grid().n_steps();
    let m1 = samples.m1();
    let dt = samples.grid().dt();
    let use_hessian = boundary.has_hessian() && !opts.force_fd;
    let h = opts.h.unwrap_or_else(|| default_h(&point.x));
    if !use_hessian && !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("finite-difference step must be > 0, got {h}")));
    }
    let vol = model.vol();
    let inv_m1 = 1.0 / m1 as f64;

    let mut outer = vec![0.0; m1 * d];
    let mut inner = vec![0.0; m1 * d];
    let mut level_drift = Vec::with_capacity(n);
    let mut level_vol = Vec::with_capacity(n);

    for i in 0..n {
        samples.outer_level(i, &mut outer);
        samples.inner_level(n - i, &mut inner);
        let inner = &inner;
        let partials: Vec<(f64, f64)> = outer
            .par_chunks(NESTED_CHUNK * d)
            .enumerate()
            .map(|(c, block)| {
                let mut base = vec![0.0; d];
                let mut shifted = vec![0.0; d];
                let mut grad = vec![0.0; d];
                let mut grad_h = vec![0.0; d];
                let mut grad_m = vec![0.0; d];
                let mut jac = vec![0.0; d * d];
                let mut prod = vec![0.0; d * d];
                let mut drift_acc = 0.0;
                let mut vol_acc = 0.0;
                for (r, row) in block.chunks_exact(d).enumerate() {
                    let j = c * NESTED_CHUNK + r;
                    for ((b, xk), o) in base.iter_mut().zip(&point.x).zip(row) {
                        *b = xk + o;
                    }
                    grad.fill(0.0);
                    if use_hessian {
                        jac.fill(0.0);
                        boundary.accumulate(&base, inner, &mut grad, Some(&mut jac));
                        for v in jac.iter_mut() {
                            *v *= inv_m1;
                        }
                    } else {
                        boundary.accumulate(&base, inner, &mut grad, None);
                    }
                    for g in grad.iter_mut() {
                        *g *= inv_m1;
                    }
                    if grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::non_finite("gradient estimate", format!("level {i}, sample {j}")));
                    }
                    drift_acc += grad.iter().map(|g| g * g).sum::<f64>().sqrt();

                    if !use_hessian {
                        for l in 0..d {
                            shifted.copy_from_slice(&base);
                            shifted[l] += h;
                            grad_h.fill(0.0);
                            boundary.accumulate(&shifted, inner, &mut grad_h, None);
                            match opts.difference {
                                Difference::Forward => {
                                    for k in 0..d {
                                        jac[k * d + l] = (grad_h[k] * inv_m1 - grad[k]) / h;
                                    }
                                }
                                Difference::Central => {
                                    shifted[l] = base[l] - h;
                                    grad_m.fill(0.0);
                                    boundary.accumulate(&shifted, inner, &mut grad_m, None);
                                    for k in 0..d {
                                        jac[k * d + l] = (grad_h[k] - grad_m[k]) * inv_m1 / (2.0 * h);
                                    }
                                }
                            }
                        }
                    }
                    let fro = jacobian_vol_norm(&jac, vol, d, &mut prod);
                    if !fro.is_finite() {
                        return Err(Error::non_finite("Jacobian estimate", format!("level {i}, sample {j}")));
                    }
                    vol_acc += fro;
                }
                Ok((drift_acc, vol_acc))
            })
            .collect::<Result<_>>()?;
        let (dp, vp): (Vec<f64>, Vec<f64>) = partials.into_iter().unzip();
        level_drift.push(pairwise_sum(&dp) * inv_m1);
        level_vol.push(pairwise_sum(&vp) * inv_m1);
    }

    Ok(Sensitivity {
        sens_drift: dt * pairwise_sum(&level_drift),
        sens_vol: dt * pairwise_sum(&level_vol),
        used_hessian_path: use_hessian,
    })
}

/// `‖J σ‖_F` for row-major `d × d` matrices.
fn jacobian_vol_norm(jac: &[f64], vol: &[f64], d: usize, prod: &mut [f64]) -> f64 {
    prod.fill(0.0);
    for k in 0..d {
        let out = &mut prod[k * d..(k + 1) * d];
        for l in 0..d {
            let a = jac[k * d + l];
            if a == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(&vol[l * d..(l + 1) * d]) {
                *o += a * s;
            }
        }
    }
    prod.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Everything an estimator run needs besides the problem itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_steps: usize,
    pub m0: usize,
    pub m1: usize,
    pub h: Option<f64>,
    pub seed: u64,
    pub force_fd: bool,
    pub difference: Difference,
    pub sampling: SamplingOptions,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            m0: 3_000_000,
            m1: 30_000,
            h: None,
            seed: 0,
            force_fd: false,
            difference: Difference::Forward,
            sampling: SamplingOptions::default(),
        }
    }
}

impl McConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn sensitivity_options(&self) -> SensitivityOptions {
        SensitivityOptions {
            h: self.h,
            force_fd: self.force_fd,
            difference: self.difference,
        }
    }

    pub fn draw(&self, model: &BaselineModel, point: &EvalPoint) -> Result<SampleGrid> {
        let grid = TimeGrid::new(point.t, model.horizon(), self.n_steps)?;
        SampleGrid::draw(model, &grid, self.m0, self.m1, self.seed, self.sampling)
    }
}

/// Output of one full estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub v0: f64,
    pub sens_drift: f64,
    pub sens_vol: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub approx: f64,
    pub used_hessian_path: bool,
    pub runtime_seconds: f64,
    pub predicted_ops: u64,
    pub seed: u64,
    pub d: usize,
    #[serde(rename = "N")]
    pub n_steps: usize,
    #[serde(rename = "M0")]
    pub m0: usize,
    #[serde(rename = "M1")]
    pub m1: usize,
    pub h: f64,
}

impl SensitivityReport {
    pub fn sens_total(&self, gamma: f64, eta: f64) -> f64 {
        gamma * self.sens_drift + eta * self.sens_vol
    }

    pub fn approx_at(&self, unc: &UncertaintySpec) -> f64 {
        self.v0 + unc.epsilon * self.sens_total(unc.gamma, unc.eta)
    }
}

/// `v⁰ + ε (γ·sens_drift + η·sens_vol)`.
pub fn first_order_approx(report: &SensitivityReport, unc: &UncertaintySpec) -> f64 {
    report.approx_at(unc)
}

/// Draws samples once and evaluates `v⁰`, both sensitivity factors and the
/// first-order approximation. Warns when `ε` is outside the expansion regime.
pub fn estimate(
    model: &BaselineModel,
    boundary: &dyn Boundary,
    point: &EvalPoint,
    unc: &UncertaintySpec,
    cfg: &McConfig,
) -> Result<SensitivityReport> {
    let regime = validate_expansion_regime(model, unc);
    if !regime.valid {
        warn!(
            "epsilon = {} is not below min(1, lambda_min) = {}; the first-order expansion is not licensed",
            unc.epsilon, regime.bound
        );
    }
    let started = Instant::now();
    let samples = cfg.draw(model, point)?;
    let v0 = v0_mc(model, boundary, point, &samples)?;
    let sens = if unc.gamma == 0.0 && unc.eta == 0.0 {
        Sensitivity {
            sens_drift: 0.0,
            sens_vol: 0.0,
            used_hessian_path: boundary.has_hessian() && !cfg.force_fd,
        }
    } else {
        sensitivity_mc(model, boundary, point, &samples, cfg.sensitivity_options())?
    };
    let runtime_seconds = started.elapsed().as_secs_f64();
    let mut report = SensitivityReport {
        v0,
        sens_drift: sens.sens_drift,
        sens_vol: sens.sens_vol,
        gamma: unc.gamma,
        eta: unc.eta,
        epsilon: unc.epsilon,
        approx: 0.0,
        used_hessian_path: sens.used_hessian_path,
        runtime_seconds,
        predicted_ops: predicted_complexity(model.dim(), cfg.n_steps, cfg.m0, cfg.m1)?,
        seed: cfg.seed,
        d: model.dim(),
        n_steps: cfg.n_steps,
        m0: cfg.m0,
        m1: cfg.m1,
        h: cfg.h.unwrap_or_else(|| default_h(&point.x)),
    };
    report.approx = first_order_approx(&report, unc);
    Ok(report)
}

/// `M₀d + N M₁(M₁+1) d + N M₁(M₁+1+d) d²` in checked integer arithmetic.
pub fn predicted_complexity(d: usize, n: usize, m0: usize, m1: usize) -> Result<u64> {
    if d == 0 || n == 0 || m0 == 0 || m1 == 0 {
        return Err(Error::arg("complexity arguments must all be at least 1"));
    }
    let of = || Error::Overflow("predicted complexity");
    let (d, n, m0, m1) = (d as u64, n as u64, m0 as u64, m1 as u64);
    let sampling = m0.checked_mul(d).ok_or_else(of)?;
    let nm1 = n.checked_mul(m1).ok_or_else(of)?;
    let gradient = nm1
        .checked_mul(m1.checked_add(1).ok_or_else(of)?)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(of)?;
    let jacobian = m1
        .checked_add(1)
        .and_then(|v| v.checked_add(d))
        .and_then(|v| nm1.checked_mul(v))
        .and_then(|v| v.checked_mul(d))
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(of)?;
    sampling
        .checked_add(gradient)
        .and_then(|v| v.checked_add(jacobian))
        .ok_or_else(of)
}

/// Mean and sample standard deviation over independent seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub runs: usize,
    pub mean: f64,
    pub std_dev: f64,
}

impl EstimatorStats {
    pub fn from_values(values: &[f64]) -> Self {
        let (mean, std_dev) = mean_std(values);
        Self {
            runs: values.len(),
            mean,
            std_dev,
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.std_dev / (self.runs as f64).sqrt()
    }
}

/// Runs `job` with seeds `base_seed, base_seed + 1, …` and summarizes it.
///
/// With a single run the standard deviation is reported as 0.
pub fn repeated_runs<F>(mut job: F, runs: usize, base_seed: u64) -> Result<EstimatorStats>
where
    F: FnMut(u64) -> Result<f64>,
{
    let stats = repeated_runs_multi(|seed| job(seed).map(|v| vec![v]), runs, base_seed)?;
    Ok(stats[0])
}

/// Like [`repeated_runs`] for jobs producing several estimates per seed.
pub fn repeated_runs_multi<F>(mut job: F, runs: usize, base_seed: u64) -> Result<Vec<EstimatorStats>>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    if runs == 0 {
        return Err(Error::arg("number of runs must be at least 1"));
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for r in 0..runs {
        let seed = base_seed.wrapping_add(r as u64);
        let values = job(seed).map_err(|e| Error::RunFailed {
            seed,
            source: Box::new(e),
        })?;
        if columns.is_empty() {
            columns = vec![Vec::with_capacity(runs); values.len()];
        } else if values.len() != columns.len() {
            return Err(Error::arg("job returned a varying number of estimates"));
        }
        for (col, v) in columns.iter_mut().zip(values) {
            col.push(v);
        }
    }
    Ok(columns.iter().map(|c| EstimatorStats::from_values(c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{FnBoundary, Growth, Quartic, Sine};
    use crate::model::generate_normalized_model;

    fn unit_model() -> BaselineModel {
        BaselineModel::new(vec![1.0], vec![1.0], 1.0).unwrap()
    }

    fn small_cfg(seed: u64) -> McConfig {
        McConfig {
            n_steps: 10,
            m0: 2000,
            m1: 200,
            seed,
            ..McConfig::default()
        }
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(predicted_complexity(1, 1, 1, 1).unwrap(), 6);
        assert_eq!(predicted_complexity(2, 3, 10, 5).unwrap(), 680);
        assert!(predicted_complexity(0, 1, 1, 1).is_err());
        assert!(matches!(
            predicted_complexity(usize::MAX, usize::MAX, 1, usize::MAX),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn constant_boundary_is_exact() {
        let model = generate_normalized_model(3, 1).unwrap();
        let f = FnBoundary::new("seven", 3, |_| 7.0, |_, g| g.fill(0.0), Growth { alpha: 1.0, constant: 1.0 })
            .unwrap()
            .with_hessian(|_, h| h.fill(0.0));
        let point = EvalPoint::origin(&model);
        let cfg = small_cfg(5);
        let s = cfg.draw(&model, &point).unwrap();
        assert_eq!(v0_mc(&model, &f, &point, &s).unwrap(), 7.0);
        let sens = sensitivity_mc(&model, &f, &point, &s, cfg.sensitivity_options()).unwrap();
        assert_eq!((sens.sens_drift, sens.sens_vol), (0.0, 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = unit_model();
        let point = EvalPoint::origin(&model);
        let s = small_cfg(1).draw(&model, &point).unwrap();
        let sine2 = Sine::new(2).unwrap();
        assert!(matches!(v0_mc(&model, &sine2, &point, &s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_value_names_sample() {
        let model = unit_model();
        let point = EvalPoint::origin(&model);
        let s = small_cfg(1).draw(&model, &point).unwrap();
        let f = FnBoundary::new("log", 1, |x| x[0].ln(), |x, g| g[0] = 1.0 / x[0], Growth { alpha: 1.0, constant: 1.0 })
            .unwrap();
        let err = v0_mc(&model, &f, &point, &s).unwrap_err();
        assert!(matches!(&err, Error::NonFinite { location, .. } if location.starts_with("sample")), "{err}");
    }

    #[test]
    fn fd_branch_rejects_bad_step() {
        let model = unit_model();
        let point = EvalPoint::origin(&model);
        let s = small_cfg(1).draw(&model, &point).unwrap();
        let opts = SensitivityOptions {
            h: Some(0.0),
            force_fd: true,
            ..Default::default()
        };
        assert!(sensitivity_mc(&model, &Quartic, &point, &s, opts).is_err());
        // a zero step is irrelevant on the Hessian branch
        let opts = SensitivityOptions { h: Some(0.0), ..Default::default() };
        assert!(sensitivity_mc(&model, &Quartic, &point, &s, opts).unwrap().used_hessian_path);
    }

    #[test]
    fn zero_weights_short_circuit() {
        let model = unit_model();
        let point = EvalPoint::origin(&model);
        let unc = UncertaintySpec::new(0.0, 0.0, 0.5).unwrap();
        let r = estimate(&model, &Quartic, &point, &unc, &small_cfg(3)).unwrap();
        assert_eq!((r.sens_drift, r.sens_vol), (0.0, 0.0));
        assert_eq!(r.approx, r.v0);
    }

    #[test]
    fn approx_is_linear_and_exact_at_zero() {
        let model = unit_model();
        let point = EvalPoint::origin(&model);
        let unc = UncertaintySpec::new(1.0, 1.0, 0.1).unwrap();
        let r = estimate(&model, &Quartic, &point, &unc, &small_cfg(3)).unwrap();
        assert_eq!(first_order_approx(&r, &unc.with_epsilon(0.0).unwrap()), r.v0);
        let a10 = first_order_approx(&r, &UncertaintySpec::new(1.0, 0.0, 0.1).unwrap());
        assert!((r.approx - (a10 + 0.1 * r.sens_vol)).abs() < 1e-12 * r.approx.abs());
        assert!(r.sens_drift >= 0.0 && r.sens_vol >= 0.0);
    }

    #[test]
    fn nested_estimator_is_thread_count_independent() {
        let model = generate_normalized_model(3, 8).unwrap();
        let f = Sine::new(3).unwrap();
        let point = EvalPoint::origin(&model);
        let unc = UncertaintySpec::new(1.0, 1.0, 0.05).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate(&model, &f, &point, &unc, &small_cfg(11)).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.v0.to_bits(), b.v0.to_bits());
        assert_eq!(a.sens_drift.to_bits(), b.sens_drift.to_bits());
        assert_eq!(a.sens_vol.to_bits(), b.sens_vol.to_bits());
    }

    #[test]
    fn repeated_runs_constant_and_failures() {
        let stats = repeated_runs(|_| Ok(3.5), 10, 0).unwrap();
        assert_eq!((stats.mean, stats.std_dev, stats.runs), (3.5, 0.0, 10));
        let err = repeated_runs(
            |seed| if seed == 12 { Err(Error::non_finite("x", "y")) } else { Ok(1.0) },
            5,
            10,
        )
        .unwrap_err();
        assert!(matches!(err, Error::RunFailed { seed: 12, .. }));
        assert!(repeated_runs(|_| Ok(1.0), 0, 0).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let model = unit_model();
        let point = EvalPoint::origin(&model);
        let unc = UncertaintySpec::new(1.0, 0.5, 0.1).unwrap();
        let r = estimate(&model, &Quartic, &point, &unc, &small_cfg(4)).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        let mut want = vec![
            "v0", "sens_drift", "sens_vol", "gamma", "eta", "epsilon", "approx", "used_hessian_path",
            "runtime_seconds", "predicted_ops", "seed", "d", "N", "M0", "M1", "h",
        ];
        want.sort();
        assert_eq!(keys, want);
        let back: SensitivityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
