mod common;

use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use sympsteer::bilinear::{
    endpoint, endpoint_differential, propagate, propagate_with, BilinearSystem, ConstantCoefficient, ControlSignal,
    PropagateOptions, Support,
};
use sympsteer::symplectic::{symplectic_defect, SymplecticMatrix};

fn oscillator(k: f64) -> BilinearSystem {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k, 0.0]);
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
    BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![b]).unwrap()
}

fn rotation(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[theta.cos(), theta.sin(), -theta.sin(), theta.cos()])
}

fn no_reprojection(steps: usize) -> PropagateOptions {
    PropagateOptions {
        reproject_every: None,
        ..PropagateOptions::with_steps(steps)
    }
}

#[test]
fn harmonic_flow_matches_rotation_at_default_grid() {
    let sys = oscillator(1.0);
    let u = ControlSignal::zeros(1, 1000, 1.0);
    let traj = propagate(&sys, &SymplecticMatrix::identity(1), &u, 1000).unwrap();
    assert!((traj.endpoint().entries() - rotation(1.0)).abs().max() <= 1e-8);
    for (t, x) in traj.times.iter().zip(&traj.states).step_by(97) {
        assert!((x.entries() - rotation(*t)).abs().max() <= 1e-8);
    }
}

#[test]
fn rk4_error_scales_as_fourth_power() {
    let sys = oscillator(1.0);
    let x0 = SymplecticMatrix::identity(1);
    let err = |n: usize| {
        let u = ControlSignal::zeros(1, n, 1.0);
        let traj = propagate_with(&sys, &x0, &u, &no_reprojection(n)).unwrap();
        (traj.endpoint().entries() - rotation(1.0)).norm()
    };
    for n in [10, 20, 40] {
        let ratio = err(n) / err(2 * n);
        assert!(ratio > 8.0 && ratio < 32.0, "n={n}: ratio {ratio}");
    }
}

#[test]
fn richardson_ratio_under_constant_control() {
    let sys = oscillator(0.0);
    let x0 = SymplecticMatrix::identity(1);
    let end = |n: usize| {
        let u = ControlSignal::from_fn(1, n, 1.0, Support::Unrestricted, |t| vec![0.01 + 2.0 * t * t]);
        propagate_with(&sys, &x0, &u, &no_reprojection(n))
            .unwrap()
            .endpoint()
            .entries()
            .clone()
    };
    let (e1, e2, e4) = (end(25), end(50), end(100));
    let ratio = (&e1 - &e2).norm() / (&e2 - &e4).norm();
    assert!(ratio > 12.0 && ratio < 24.0, "ratio {ratio}");

    let u = ControlSignal::from_fn(1, 2000, 1.0, Support::Unrestricted, |_| vec![0.01]);
    let x = endpoint(&sys, &x0, &u, 2000).unwrap();
    assert!(x.defect() <= 1e-8);
    let u = ControlSignal::from_fn(1, 1000, 1.0, Support::Unrestricted, |_| vec![0.01]);
    assert!((endpoint(&sys, &x0, &u, 1000).unwrap().entries() - x.entries()).norm() <= 1e-12);
}

#[test]
fn cocycle_over_split_interval() {
    let mut rng = common::rng(5);
    for m in 1..=3 {
        let sys = common::random_system(&mut rng, m, 2);
        let u = common::random_control(&mut rng, 2, 1000, 0.5);
        let x0 = SymplecticMatrix::identity(m);
        let whole = propagate_with(&sys, &x0, &u, &PropagateOptions::with_steps(1000)).unwrap();
        let half = |span, start: &SymplecticMatrix| {
            propagate_with(
                &sys,
                start,
                &u,
                &PropagateOptions {
                    span: Some(span),
                    ..PropagateOptions::with_steps(500)
                },
            )
            .unwrap()
        };
        let first = half((0.0, 0.5), &x0);
        let second = half((0.5, 1.0), first.endpoint());
        let diff = (whole.endpoint().entries() - second.endpoint().entries()).abs().max();
        assert!(diff <= 1e-10, "m={m}: {diff}");
        assert!((whole.states[500].entries() - first.endpoint().entries()).abs().max() <= 1e-10);
    }
}

#[test]
fn zero_control_reproduces_the_fundamental_solution() {
    let mut rng = common::rng(9);
    let sys = common::random_system(&mut rng, 2, 1);
    let start = propagate(
        &sys,
        &SymplecticMatrix::identity(2),
        &common::random_control(&mut rng, 1, 200, 0.3),
        200,
    )
    .unwrap()
    .endpoint()
    .clone();
    let zero = ControlSignal::zeros(1, 400, 1.0);
    let opts = PropagateOptions {
        with_fundamental: true,
        ..PropagateOptions::with_steps(400)
    };
    let from_identity = propagate_with(&sys, &SymplecticMatrix::identity(2), &zero, &opts).unwrap();
    let fundamental = from_identity.fundamental.as_ref().unwrap();
    for (x, s) in from_identity.states.iter().zip(fundamental) {
        assert!((x.entries() - s.entries()).abs().max() <= 1e-12);
    }
    let moved = endpoint(&sys, &start, &zero, 400).unwrap();
    let expected = from_identity.endpoint().entries() * start.entries();
    assert!((moved.entries() - expected).abs().max() <= 1e-10);
}

#[test]
fn differential_matches_central_differences() {
    let mut rng = common::rng(21);
    let steps = 1000;
    for m in [1, 2] {
        let sys = common::random_system(&mut rng, m, 2);
        let x0 = SymplecticMatrix::identity(m);
        let base_u = common::random_control(&mut rng, 2, steps, 0.2);
        let opts = PropagateOptions {
            with_fundamental: true,
            ..PropagateOptions::with_steps(steps)
        };
        let base = propagate_with(&sys, &x0, &base_u, &opts).unwrap();
        for _ in 0..5 {
            let v = common::random_control(&mut rng, 2, steps, 1.0);
            let d = endpoint_differential(&sys, &base, &v).unwrap();
            let eps = 1e-4;
            let plus = ControlSignal::combine(&base_u, &[eps], std::slice::from_ref(&v)).unwrap();
            let minus = ControlSignal::combine(&base_u, &[-eps], std::slice::from_ref(&v)).unwrap();
            let fd = (endpoint(&sys, &x0, &plus, steps).unwrap().entries()
                - endpoint(&sys, &x0, &minus, steps).unwrap().entries())
                / (2.0 * eps);
            let rel = (&d - &fd).norm() / fd.norm();
            assert!(rel <= 1e-5, "m={m}: relative error {rel}");
        }
    }
}

#[test]
fn one_sided_difference_error_decays_linearly() {
    let mut rng = common::rng(4);
    let steps = 1000;
    let sys = common::random_system(&mut rng, 1, 1);
    let x0 = SymplecticMatrix::identity(1);
    let zero = ControlSignal::zeros(1, steps, 1.0);
    let opts = PropagateOptions {
        with_fundamental: true,
        ..PropagateOptions::with_steps(steps)
    };
    let base = propagate_with(&sys, &x0, &zero, &opts).unwrap();
    let v = common::random_control(&mut rng, 1, steps, 1.0);
    let d = endpoint_differential(&sys, &base, &v).unwrap();
    let e0 = base.endpoint().entries().clone();
    let gaps: Vec<f64> = [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&eps| {
            let e = endpoint(&sys, &x0, &v.scaled(eps), steps).unwrap();
            (e.entries() - &e0 - eps * &d).norm() / eps
        })
        .collect();
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 5.0 && ratio < 20.0, "{gaps:?}");
    }
}

#[test]
fn differential_is_linear_and_vanishes_at_zero() {
    let mut rng = common::rng(8);
    let sys = common::random_system(&mut rng, 2, 2);
    let x0 = SymplecticMatrix::identity(2);
    let opts = PropagateOptions {
        with_fundamental: true,
        ..PropagateOptions::with_steps(300)
    };
    let base = propagate_with(&sys, &x0, &common::random_control(&mut rng, 2, 300, 0.3), &opts).unwrap();
    let zero = ControlSignal::zeros(2, 300, 1.0);
    assert_eq!(endpoint_differential(&sys, &base, &zero).unwrap().norm(), 0.0);
    let v = common::random_control(&mut rng, 2, 300, 1.0);
    let w = common::random_control(&mut rng, 2, 300, 1.0);
    let dv = endpoint_differential(&sys, &base, &v).unwrap();
    let dw = endpoint_differential(&sys, &base, &w).unwrap();
    let d_scaled = endpoint_differential(&sys, &base, &v.scaled(-2.5)).unwrap();
    assert!((&d_scaled + 2.5 * &dv).norm() <= 1e-12 * dv.norm().max(1.0));
    let sum = ControlSignal::combine(&v, &[1.0], std::slice::from_ref(&w)).unwrap();
    let d_sum = endpoint_differential(&sys, &base, &sum).unwrap();
    assert!((d_sum - dv - dw).norm() <= 1e-12 * 10.0);
}

#[test]
fn differential_is_tangent_at_the_endpoint() {
    let mut rng = common::rng(12);
    let sys = common::random_system(&mut rng, 2, 3);
    let opts = PropagateOptions {
        with_fundamental: true,
        ..PropagateOptions::with_steps(500)
    };
    let base = propagate_with(
        &sys,
        &SymplecticMatrix::identity(2),
        &common::random_control(&mut rng, 3, 500, 0.3),
        &opts,
    )
    .unwrap();
    let y = endpoint_differential(&sys, &base, &common::random_control(&mut rng, 3, 500, 1.0)).unwrap();
    let defect = sympsteer::symplectic::tangency_defect(base.endpoint().entries(), &y);
    assert!(defect <= 1e-9 * y.norm().max(1.0), "{defect}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectories_stay_on_the_group(seed in any::<u64>(), m in 1usize..=3, k in 1usize..=3, amp in 0.0f64..2.0) {
        let mut rng = common::rng(seed);
        let sys = common::random_system(&mut rng, m, k);
        let u = common::random_control(&mut rng, k, 1000, amp.max(1e-3));
        let traj = propagate(&sys, &SymplecticMatrix::identity(m), &u, 1000).unwrap();
        prop_assert!(traj.max_defect() <= 1e-8);
        let id = SymplecticMatrix::identity(m);
        prop_assert_eq!(traj.states[0].entries(), id.entries());
        for x in &traj.states {
            prop_assert!(symplectic_defect(x.entries()).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn hermite_interpolation_hits_the_nodes(seed in any::<u64>(), steps in 4usize..60) {
        let mut rng = common::rng(seed);
        let u = common::random_control(&mut rng, 2, steps, 1.0);
        for j in 0..=steps {
            let v = u.value_at(u.time(j));
            let s = u.sample(j);
            prop_assert!((v[0] - s[0]).abs() <= 1e-12 && (v[1] - s[1]).abs() <= 1e-12);
        }
    }
}
