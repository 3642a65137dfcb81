#![allow(dead_code)]

use std::sync::Arc;

use kolsens::boundary::{Boundary, FnBoundary, Growth};
use kolsens::model::BaselineModel;

pub fn quartic_model() -> BaselineModel {
    BaselineModel::new(vec![1.0], vec![1.0], 1.0).unwrap()
}

/// `f(x) = aᵀx + c` with an exact zero Hessian.
pub fn affine(a: Vec<f64>, c: f64) -> FnBoundary {
    let d = a.len();
    let norm: f64 = a.iter().map(|v| v.abs()).sum();
    let grad = a.clone();
    FnBoundary::new(
        "affine",
        d,
        move |x| a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() + c,
        move |_, out| out.copy_from_slice(&grad),
        Growth {
            alpha: 1.0,
            constant: norm + c.abs() + 1.0,
        },
    )
    .unwrap()
    .with_hessian(|_, out| out.fill(0.0))
    .convex(true)
}

/// `y ↦ f(shift + y)`, forwarding all derivatives.
pub fn shifted(f: Arc<dyn Boundary>, shift: Vec<f64>) -> FnBoundary {
    let d = f.dim();
    let growth = f.growth();
    let (f1, f2, f3) = (f.clone(), f.clone(), f.clone());
    let (s1, s2, s3) = (shift.clone(), shift.clone(), shift);
    let at = |s: &[f64], y: &[f64]| -> Vec<f64> { s.iter().zip(y).map(|(a, b)| a + b).collect() };
    let base = FnBoundary::new(
        "shifted",
        d,
        move |y| f1.value(&at(&s1, y)),
        move |y, out| f2.gradient(&at(&s2, y), out),
        Growth {
            alpha: growth.alpha,
            constant: growth.constant * 1e6,
        },
    )
    .unwrap();
    if f.has_hessian() {
        base.with_hessian(move |y, out| f3.hessian(&at(&s3, y), out))
    } else {
        base
    }
}

/// Wraps a boundary and hides its Hessian, forcing the difference branch.
pub fn without_hessian(f: Arc<dyn Boundary>) -> FnBoundary {
    let (f1, f2) = (f.clone(), f.clone());
    FnBoundary::new(
        "no-hessian",
        f.dim(),
        move |x| f1.value(x),
        move |x, out| f2.gradient(x, out),
        f.growth(),
    )
    .unwrap()
}
