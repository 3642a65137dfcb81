//! Terminal conditions `f: ℝᵈ → ℝ` together with their derivatives.
//!
//! Evaluators must be pure: the engine calls them concurrently from several
//! workers and relies on identical inputs producing identical outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Polynomial growth declaration `‖D²f(x)‖_F ≤ C·(1 + |x|^α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Growth {
    pub alpha: f64,
    pub constant: f64,
}

/// A terminal condition with gradient and, optionally, Hessian.
pub trait Boundary: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f(x)` into `out` (length `d`).
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Whether [`Boundary::hessian`] is available. Declared by the author.
    fn has_hessian(&self) -> bool {
        false
    }

    /// Writes `D²f(x)` row-major into `out` (length `d²`).
    ///
    /// Only called when [`Boundary::has_hessian`] returns true.
    fn hessian(&self, _x: &[f64], _out: &mut [f64]) {
        unimplemented!("boundary does not provide a Hessian")
    }

    fn growth(&self) -> Growth;

    /// Declared convexity; the 1-D finite-difference oracle only accepts
    /// convex terminal conditions.
    fn is_convex(&self) -> bool {
        false
    }

    fn name(&self) -> &str;

    /// Adds `Σₘ ∇f(base + offsets[m])` into `grad_sum` and, when given,
    /// `Σₘ D²f(base + offsets[m])` into `hess_sum`.
    ///
    /// `offsets` is row-major with `d` columns. This is the inner loop of the
    /// nested estimator; built-ins override it with tighter code.
    fn accumulate(
        &self,
        base: &[f64],
        offsets: &[f64],
        grad_sum: &mut [f64],
        mut hess_sum: Option<&mut [f64]>,
    ) {
        let d = base.len();
        let mut y = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut h = if hess_sum.is_some() { vec![0.0; d * d] } else { Vec::new() };
        for row in offsets.chunks_exact(d) {
            for ((yk, bk), ok) in y.iter_mut().zip(base).zip(row) {
                *yk = bk + ok;
            }
            self.gradient(&y, &mut g);
            for (acc, gk) in grad_sum.iter_mut().zip(&g) {
                *acc += gk;
            }
            if let Some(hs) = hess_sum.as_deref_mut() {
                self.hessian(&y, &mut h);
                for (acc, hk) in hs.iter_mut().zip(&h) {
                    *acc += hk;
                }
            }
        }
    }
}

/// `f(x) = x⁴` in one dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct Quartic;

impl Boundary for Quartic {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> f64 {
        let v = x[0] * x[0];
        v * v
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 4.0 * x[0] * x[0] * x[0];
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 12.0 * x[0] * x[0];
    }

    fn growth(&self) -> Growth {
        Growth {
            alpha: 2.0,
            constant: 12.0,
        }
    }

    fn is_convex(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "quartic"
    }

    fn accumulate(&self, base: &[f64], offsets: &[f64], grad_sum: &mut [f64], hess_sum: Option<&mut [f64]>) {
        let b = base[0];
        // four lanes so the reduction pipelines
        let mut g = [0.0f64; 4];
        let mut h = [0.0f64; 4];
        let chunks = offsets.chunks_exact(4);
        let rest = chunks.remainder();
        match hess_sum {
            Some(hs) => {
                for c in chunks {
                    for l in 0..4 {
                        let y = b + c[l];
                        let y2 = y * y;
                        g[l] += y2 * y;
                        h[l] += y2;
                    }
                }
                for &o in rest {
                    let y = b + o;
                    let y2 = y * y;
                    g[0] += y2 * y;
                    h[0] += y2;
                }
                hs[0] += 12.0 * ((h[0] + h[1]) + (h[2] + h[3]));
            }
            None => {
                for c in chunks {
                    for l in 0..4 {
                        let y = b + c[l];
                        g[l] += y * y * y;
                    }
                }
                for &o in rest {
                    let y = b + o;
                    g[0] += y * y * y;
                }
            }
        }
        grad_sum[0] += 4.0 * ((g[0] + g[1]) + (g[2] + g[3]));
    }
}

/// `f(x) = sin(Σᵢ xᵢ)` in any dimension.
#[derive(Debug, Clone, Copy)]
pub struct Sine {
    dim: usize,
}

impl Sine {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("sine boundary needs dim >= 1"));
        }
        Ok(Self { dim })
    }
}

impl Boundary for Sine {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>().sin()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let c = x.iter().sum::<f64>().cos();
        out.fill(c);
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let s = x.iter().sum::<f64>().sin();
        out.fill(-s);
    }

    fn growth(&self) -> Growth {
        Growth {
            alpha: 1.0,
            constant: self.dim as f64,
        }
    }

    fn name(&self) -> &str {
        "sine"
    }

    // Gradient and Hessian are multiples of 1_d and 1_{d×d}, so only the two
    // scalar sums over the inner pool are needed.
    fn accumulate(&self, base: &[f64], offsets: &[f64], grad_sum: &mut [f64], hess_sum: Option<&mut [f64]>) {
        let d = self.dim;
        let b: f64 = base.iter().sum();
        let mut cos_sum = 0.0;
        let mut sin_sum = 0.0;
        if d == 1 {
            for &o in offsets {
                let (s, c) = (b + o).sin_cos();
                cos_sum += c;
                sin_sum += s;
            }
        } else {
            for row in offsets.chunks_exact(d) {
                let (s, c) = (b + lane_sum(row)).sin_cos();
                cos_sum += c;
                sin_sum += s;
            }
        }
        for g in grad_sum.iter_mut() {
            *g += cos_sum;
        }
        if let Some(hs) = hess_sum {
            for h in hs.iter_mut() {
                *h -= sin_sum;
            }
        }
    }
}

/// Sum with four independent accumulators so the adds can overlap.
fn lane_sum(v: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = v.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VecFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// User-supplied evaluator bundle.
pub struct FnBoundary {
    name: String,
    dim: usize,
    value: Box<ValueFn>,
    gradient: Box<VecFn>,
    hessian: Option<Box<VecFn>>,
    growth: Growth,
    convex: bool,
}

impl FnBoundary {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        growth: Growth,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("boundary dimension must be at least 1"));
        }
        if !(growth.alpha >= 1.0 && growth.constant > 0.0) {
            return Err(Error::arg("growth needs alpha >= 1 and constant > 0"));
        }
        Ok(Self {
            name: name.into(),
            dim,
            value: Box::new(value),
            gradient: Box::new(gradient),
            hessian: None,
            growth,
            convex: false,
        })
    }

    pub fn with_hessian(mut self, hessian: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hessian = Some(Box::new(hessian));
        self
    }

    pub fn convex(mut self, convex: bool) -> Self {
        self.convex = convex;
        self
    }
}

impl std::fmt::Debug for FnBoundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnBoundary")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("has_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl Boundary for FnBoundary {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }

    fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        match &self.hessian {
            Some(h) => h(x, out),
            None => unimplemented!("boundary {} has no Hessian", self.name),
        }
    }

    fn growth(&self) -> Growth {
        self.growth
    }

    fn is_convex(&self) -> bool {
        self.convex
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Worst discrepancies found by [`check_consistency`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    pub probes: usize,
    /// Max mixed error `|fd − g| / max(1, |g|)` of central differences of
    /// the value against the gradient.
    pub gradient_error: f64,
    /// Same, for central differences of the gradient against the Hessian.
    pub hessian_error: Option<f64>,
    /// Max `|H − Hᵀ|` entry.
    pub asymmetry: Option<f64>,
    /// Every probe satisfied the declared growth bound.
    pub growth_ok: bool,
}

impl ConsistencyReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.gradient_error < tol
            && self.hessian_error.is_none_or(|e| e < tol)
            && self.asymmetry.is_none_or(|e| e < tol)
            && self.growth_ok
    }
}

/// Spot-checks derivative consistency and the declared growth at random
/// probes drawn uniformly from `[-radius, radius]^d`.
pub fn check_consistency(
    f: &dyn Boundary,
    probes: usize,
    step: f64,
    radius: f64,
    seed: u64,
) -> Result<ConsistencyReport> {
    if probes == 0 || !(step > 0.0) || !(radius > 0.0) {
        return Err(Error::arg("need probes >= 1, step > 0 and radius > 0"));
    }
    let d = f.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    let with_h = f.has_hessian();
    let mut grad_err = 0.0f64;
    let mut hess_err = 0.0f64;
    let mut asym = 0.0f64;
    let mut growth_ok = true;
    let growth = f.growth();

    for _ in 0..probes {
        for v in x.iter_mut() {
            *v = rng.random_range(-radius..=radius);
        }
        f.gradient(&x, &mut g);
        if with_h {
            f.hessian(&x, &mut h);
        }
        for l in 0..d {
            let orig = x[l];
            x[l] = orig + step;
            let fp = f.value(&x);
            if with_h {
                f.gradient(&x, &mut gp);
            }
            x[l] = orig - step;
            let fm = f.value(&x);
            if with_h {
                f.gradient(&x, &mut gm);
            }
            x[l] = orig;

            let fd = (fp - fm) / (2.0 * step);
            grad_err = grad_err.max((fd - g[l]).abs() / g[l].abs().max(1.0));
            if with_h {
                for k in 0..d {
                    let fd = (gp[k] - gm[k]) / (2.0 * step);
                    let hk = h[k * d + l];
                    hess_err = hess_err.max((fd - hk).abs() / hk.abs().max(1.0));
                }
            }
        }
        if with_h {
            for k in 0..d {
                for l in 0..k {
                    asym = asym.max((h[k * d + l] - h[l * d + k]).abs());
                }
            }
            let fro = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if fro > growth.constant * (1.0 + norm_x.powf(growth.alpha)) {
                growth_ok = false;
            }
        }
    }
    Ok(ConsistencyReport {
        probes,
        gradient_error: grad_err,
        hessian_error: with_h.then_some(hess_err),
        asymmetry: with_h.then_some(asym),
        growth_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartic_and_sine_are_consistent() {
        let q = check_consistency(&Quartic, 20, 1e-5, 2.0, 7).unwrap();
        assert!(q.passes(1e-5), "{q:?}");
        for d in [1, 3, 10] {
            let s = Sine::new(d).unwrap();
            let r = check_consistency(&s, 20, 1e-5, 2.0, 11).unwrap();
            assert!(r.passes(1e-5), "d = {d}: {r:?}");
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        let bad = FnBoundary::new(
            "bad",
            1,
            |x| x[0] * x[0],
            |x, g| g[0] = 3.0 * x[0],
            Growth { alpha: 1.0, constant: 2.0 },
        )
        .unwrap();
        let r = check_consistency(&bad, 20, 1e-5, 2.0, 1).unwrap();
        assert!(!r.passes(1e-5));
    }

    #[test]
    fn detects_growth_violation() {
        let steep = FnBoundary::new(
            "steep",
            1,
            |x| x[0].powi(6),
            |x, g| g[0] = 6.0 * x[0].powi(5),
            Growth { alpha: 1.0, constant: 1.0 },
        )
        .unwrap()
        .with_hessian(|x, h| h[0] = 30.0 * x[0].powi(4));
        let r = check_consistency(&steep, 20, 1e-5, 3.0, 1).unwrap();
        assert!(!r.growth_ok);
    }

    #[test]
    fn specialised_accumulate_matches_default() {
        // default trait path through FnBoundary vs the built-in fast paths
        let offsets: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();

        let generic_q = FnBoundary::new("q", 1, |x| x[0].powi(4), |x, g| g[0] = 4.0 * x[0].powi(3), Quartic.growth())
            .unwrap()
            .with_hessian(|x, h| h[0] = 12.0 * x[0] * x[0]);
        let (mut g1, mut h1, mut g2, mut h2) = ([0.0], [0.0], [0.0], [0.0]);
        Quartic.accumulate(&[0.3], &offsets, &mut g1, Some(&mut h1));
        generic_q.accumulate(&[0.3], &offsets, &mut g2, Some(&mut h2));
        assert!((g1[0] - g2[0]).abs() < 1e-10 * g2[0].abs().max(1.0));
        assert!((h1[0] - h2[0]).abs() < 1e-10 * h2[0].abs().max(1.0));

        let sine = Sine::new(3).unwrap();
        let offsets3: Vec<f64> = (0..36).map(|i| (i as f64 * 0.91).cos()).collect();
        let generic_s = FnBoundary::new(
            "s",
            3,
            move |x| sine.value(x),
            move |x, g| sine.gradient(x, g),
            sine.growth(),
        )
        .unwrap()
        .with_hessian(move |x, h| sine.hessian(x, h));
        let base = [0.1, -0.2, 0.4];
        let (mut g1, mut h1) = (vec![0.0; 3], vec![0.0; 9]);
        let (mut g2, mut h2) = (vec![0.0; 3], vec![0.0; 9]);
        sine.accumulate(&base, &offsets3, &mut g1, Some(&mut h1));
        generic_s.accumulate(&base, &offsets3, &mut g2, Some(&mut h2));
        for (a, b) in g1.iter().zip(&g2).chain(h1.iter().zip(&h2)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
