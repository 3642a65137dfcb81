use std::sync::Arc;

use kolsens::analytic::{quartic_sensitivity, sine_v0, SensitivityKind};
use kolsens::boundary::{Boundary, FnBoundary, Growth, Quartic, Sine};
use kolsens::fd_oracle::{epsilon_sweep, solve, AdvectionScheme, FdProblem1d};
use kolsens::quadrature::TimeRule;
use proptest::prelude::*;

fn quartic() -> FdProblem1d {
    FdProblem1d::new(1.0, 1.0, 1.0, Arc::new(Quartic))
}

fn value(p: &FdProblem1d) -> f64 {
    solve(p).unwrap().at(p.t, p.x).unwrap()
}

#[test]
fn baseline_values_match_closed_forms() {
    for half_width in [None, Some(8.0)] {
        let p = FdProblem1d { half_width, ..quartic() };
        let v = value(&p);
        assert!((v - 10.0).abs() < 0.005 * 10.0, "{half_width:?}: {v}");
    }
    let sine = FdProblem1d::new(1.0, 1.0, 1.0, Arc::new(Sine::new(1).unwrap()));
    let v = value(&sine);
    assert!((v - sine_v0(1.0)).abs() < 0.005 * sine_v0(1.0), "{v}");
}

#[test]
fn drift_uncertainty_at_tenth() {
    let p = quartic().with_uncertainty(1.0, 0.0, 0.1);
    let v = value(&p);
    assert!((v - 11.64).abs() < 0.2, "{v}");
}

#[test]
fn terminal_row_is_bit_exact() {
    let problems = [
        quartic().with_uncertainty(1.0, 1.0, 0.1),
        FdProblem1d {
            nx: 301,
            ..FdProblem1d::new(0.3, 0.8, 2.0, Arc::new(Sine::new(1).unwrap())).with_uncertainty(1.0, 0.0, 0.2)
        },
    ];
    for p in problems {
        let sol = solve(&p).unwrap();
        for (x, v) in sol.grid_x.iter().zip(sol.terminal()) {
            assert_eq!(v.to_bits(), p.boundary.value(&[*x]).to_bits());
        }
        assert!(sol.values.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn value_is_nondecreasing_in_epsilon() {
    for (gamma, eta) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let values: Vec<f64> = (0..=5)
            .map(|k| value(&quartic().with_uncertainty(gamma, eta, 0.02 * k as f64)))
            .collect();
        assert!(values.windows(2).all(|w| w[1] >= w[0]), "({gamma}, {eta}): {values:?}");
    }
}

#[test]
fn refinement_changes_shrink() {
    let values: Vec<f64> = [251, 501, 1001, 2001]
        .iter()
        .map(|&nx| value(&FdProblem1d { nx, ..quartic() }))
        .collect();
    let changes: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    assert!(changes.windows(2).all(|c| c[1] < c[0]), "{values:?}");
}

#[test]
fn upwind_scheme_is_available_and_monotone() {
    let p = FdProblem1d {
        scheme: AdvectionScheme::Upwind,
        ..quartic()
    };
    let sol = solve(&p).unwrap();
    assert_eq!(sol.scheme, AdvectionScheme::Upwind);
    let base = sol.at(0.0, 0.0).unwrap();
    let wider = value(&p.clone().with_uncertainty(1.0, 1.0, 0.05));
    assert!(wider >= base);
    // first order in Δx, so only a loose match to the closed form
    assert!((base - 10.0).abs() < 0.02 * 10.0, "{base}");
}

#[test]
fn drift_sweep_error_is_quadratic() {
    let template = quartic().with_uncertainty(1.0, 0.0, 0.0);
    let v0 = value(&template);
    let sens = quartic_sensitivity(0.0, 0.0, 1.0, 1.0, 1.0, SensitivityKind::Drift, TimeRule::default()).unwrap();
    let eps: Vec<f64> = (1..=10).map(|k| 0.01 * k as f64).collect();
    let approx: Vec<f64> = eps.iter().map(|e| v0 + e * sens).collect();
    let table = epsilon_sweep(&template, &eps, &approx).unwrap();
    assert_eq!(table.rows.len(), eps.len());
    let slope = table.slope.unwrap();
    assert!((1.7..=2.3).contains(&slope), "slope {slope}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constant_terminal_is_preserved(
        c in -5.0f64..5.0,
        b0 in -2.0f64..2.0,
        sigma0 in 0.2f64..2.0,
        gamma in 0.0f64..1.0,
        eta in 0.0f64..1.0,
        eps in 0.0f64..0.2,
    ) {
        let f = FnBoundary::new("c", 1, move |_| c, |_, g| g[0] = 0.0, Growth { alpha: 1.0, constant: 6.0 })
            .unwrap()
            .convex(true);
        let p = FdProblem1d {
            nx: 101,
            ..FdProblem1d::new(b0, sigma0, 1.0, Arc::new(f) as Arc<dyn Boundary>).with_uncertainty(gamma, eta, eps)
        };
        let sol = solve(&p).unwrap();
        prop_assert!(sol.values.iter().all(|v| *v == c));
    }
}
