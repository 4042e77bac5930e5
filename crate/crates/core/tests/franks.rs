mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use sympsteer::bilinear::{ControlSignal, Interval, Support};
use sympsteer::franks::{
    channel_labels, contreras_check, jacobi_system, linearized_poincare, max_avoidance_half_width, perturbation_window,
    sweep, sweep_target, synthesize, CurvaturePath, PerturbationSetup, SweepOptions, SynthesisOptions,
};
use sympsteer::steering::{Avoidance, SupportMask};
use sympsteer::symplectic::{reproject, standard_form};
use sympsteer::Error;

fn opts(steps: usize, avoided: Vec<Avoidance>) -> SynthesisOptions {
    SynthesisOptions {
        steps,
        avoided,
        ..SynthesisOptions::default()
    }
}

#[test]
fn poincare_maps_of_constant_curvature() {
    let steps = 1000;
    let flat = CurvaturePath::constant(DMatrix::zeros(1, 1), steps).unwrap();
    let p = linearized_poincare(&flat, &ControlSignal::zeros(1, steps, 1.0), steps).unwrap();
    assert!(
        (p.entries() - DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]))
            .abs()
            .max()
            <= 1e-12
    );

    let round = CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), steps).unwrap();
    let p = linearized_poincare(&round, &ControlSignal::zeros(1, steps, 1.0), steps).unwrap();
    let (c, s) = (1f64.cos(), 1f64.sin());
    assert!(
        (p.entries() - DMatrix::from_row_slice(2, 2, &[c, s, -s, c]))
            .abs()
            .max()
            <= 1e-8
    );

    let saddle = CurvaturePath::diagonal_affine(vec![1.0, -1.0], vec![0.0, 0.0], steps).unwrap();
    let p = linearized_poincare(&saddle, &ControlSignal::zeros(3, steps, 1.0), steps).unwrap();
    let (ch, sh) = (1f64.cosh(), 1f64.sinh());
    #[rustfmt::skip]
    let expected = DMatrix::from_row_slice(4, 4, &[
        c, 0.0, s, 0.0,
        0.0, ch, 0.0, sh,
        -s, 0.0, c, 0.0,
        0.0, sh, 0.0, ch,
    ]);
    assert!((p.entries() - expected).abs().max() <= 1e-8);
    assert!(p.defect() <= 1e-8);
}

#[test]
fn surface_system_structure() {
    let path = CurvaturePath::diagonal_affine(vec![2.0], vec![-1.0], 100).unwrap();
    let sys = jacobi_system(&path).unwrap();
    assert_eq!(sys.channels(), 1);
    assert_eq!(
        sys.control_matrices()[0],
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])
    );
    for t in [0.0, 0.4, 1.0] {
        let k = 2.0 - t;
        let a = sys.drift().value(t);
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k, 0.0]));
    }
    let sys = jacobi_system(&CurvaturePath::diagonal_affine(vec![1.0, 2.0], vec![0.0, 0.0], 10).unwrap()).unwrap();
    assert_eq!(sys.channels(), 3);
    let ja = standard_form(2) * sys.drift().value(0.5);
    assert_eq!(ja.transpose(), ja);
    assert_eq!(
        channel_labels(3),
        ["u_1_1", "u_1_2", "u_1_3", "u_2_2", "u_2_3", "u_3_3"]
    );
}

#[test]
fn contreras_examples() {
    let mask = SupportMask::window(Interval::new(0.05, 0.95));
    let distinct = CurvaturePath::diagonal_affine(vec![1.0, 2.0], vec![0.0, 0.0], 100).unwrap();
    let report = contreras_check(&distinct, &mask, 1e-3).unwrap();
    assert!(report.pass);
    assert!((report.min_gap.unwrap() - 1.0).abs() <= 1e-12);

    let repeated = CurvaturePath::constant(DMatrix::identity(2, 2), 100).unwrap();
    let report = contreras_check(&repeated, &mask, 1e-3).unwrap();
    assert!(!report.pass);
    assert!(report.min_gap.unwrap().abs() <= 1e-12);
    assert!(matches!(
        PerturbationSetup::new(&repeated, &opts(100, vec![])),
        Err(Error::ContrerasFailed { .. })
    ));

    let ramp = CurvaturePath::diagonal_affine(vec![1.0, 1.0], vec![0.0, 1.0], 1000).unwrap();
    let report = contreras_check(&ramp, &SupportMask::window(Interval::new(0.2, 0.8)), 1e-3).unwrap();
    assert!((report.best_time - 0.8).abs() <= 0.01);
    assert!((report.min_gap.unwrap() - 0.8).abs() <= 0.01);
    assert_eq!(report.eigenvalues.len(), 2);
    assert!(report.eigenvalues[0] <= report.eigenvalues[1]);
}

#[test]
fn window_from_clearance_parameters() {
    let w = perturbation_window(0.5, 0.05).unwrap();
    assert!((w.start - 0.55).abs() < 1e-15 && (w.end - 0.95).abs() < 1e-15);
    for (tau, delta) in [(0.0, 0.0), (0.5, 0.3), (1.5, 0.1), (0.5, -0.1)] {
        assert!(perturbation_window(tau, delta).is_err());
    }
}

#[test]
fn unperturbed_target_gives_the_zero_plan() {
    let path = CurvaturePath::diagonal_affine(vec![1.0, 2.0], vec![0.0, 0.0], 400).unwrap();
    let setup = PerturbationSetup::new(&path, &opts(400, vec![])).unwrap();
    let plan = setup.solve(&setup.unperturbed().clone()).unwrap();
    assert!(plan.u.is_zero());
    assert_eq!(plan.iterations, 0);
}

#[test]
fn surface_synthesis_with_and_without_avoidance() {
    let path = CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), 1000).unwrap();
    for avoided in [vec![], vec![Avoidance::new(0.5, 0.02)]] {
        let o = opts(1000, avoided.clone());
        let setup = PerturbationSetup::new(&path, &o).unwrap();
        let base = setup.unperturbed();
        let dir = sympsteer::franks::random_tangent_direction(base, 3, 0);
        let target = reproject(&(base.entries() + 1e-3 * dir), 1e-12).unwrap();
        let plan = synthesize(&path, &target, &o).unwrap();
        assert!(plan.residual <= 1e-9);
        assert!(!plan.u.is_zero());
        for j in 0..=plan.u.intervals() {
            let t = plan.u.time(j);
            let outside = !(t > 0.05 && t < 0.95) || (!avoided.is_empty() && (t - 0.5).abs() <= 0.02);
            if outside {
                assert!(plan.u.sample(j).iter().all(|&v| v == 0.0), "nonzero at t={t}");
            }
        }
        if !avoided.is_empty() {
            for t in [0.485, 0.5, 0.515] {
                assert!(plan.u.value_at(t).iter().all(|v| v.abs() <= 1e-300));
            }
        }
    }
}

#[test]
fn avoidance_bisection() {
    let path = CurvaturePath::diagonal_affine(vec![1.0, 2.0], vec![0.0, 0.0], 400).unwrap();
    let base = opts(400, vec![]);
    let rho = max_avoidance_half_width(&path, 0.5, &base, 0.5, 10).unwrap();
    assert!(rho > 0.02 && rho < 0.5, "rho {rho}");
    let inside = opts(400, vec![Avoidance::new(0.5, 0.9 * rho)]);
    let setup = PerturbationSetup::new(&path, &inside).unwrap();
    assert_eq!(setup.basis.size(), 10);
    let covering = opts(400, vec![Avoidance::new(0.5, 0.6)]);
    assert!(matches!(
        PerturbationSetup::new(&path, &covering),
        Err(Error::AvoidanceInfeasible(_))
    ));
}

#[test]
fn sweep_is_deterministic_across_worker_counts() {
    let path = CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), 400).unwrap();
    let synth = opts(400, vec![]);
    let run = |threads| {
        sweep(
            &path,
            &synth,
            &SweepOptions {
                radii: vec![1e-4, 1e-3, 1e-2],
                samples: 6,
                seed: 19,
                threads,
            },
        )
        .unwrap()
    };
    let a = run(Some(1));
    let b = run(Some(4));
    let c = run(None);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    assert!((a.slope - 1.0).abs() <= 0.1);
    let ratios: Vec<f64> = a.radii.iter().map(|r| r.max_ratio).collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    assert!(hi / lo <= 3.0);
    assert!(a.radii.iter().all(|r| r.solved == r.samples));
    assert_eq!(a.rows.len(), 18);
    for (idx, row) in a.rows.iter().enumerate() {
        assert_eq!(row.sample, idx % 6);
    }

    let setup = PerturbationSetup::new(&path, &synth).unwrap();
    let t1 = sweep_target(&setup, 1e-3, 19, 2).unwrap();
    let t2 = sweep_target(&setup, 1e-2, 19, 2).unwrap();
    let d1 = (t1.entries() - setup.unperturbed().entries()) / 1e-3;
    let d2 = (t2.entries() - setup.unperturbed().entries()) / 1e-2;
    assert!((d1 - d2).norm() <= 0.05);
}

#[test]
fn sampled_paths_need_symmetric_samples() {
    let mut samples = vec![DMatrix::identity(2, 2); 11];
    samples[3][(0, 1)] = 0.5;
    assert!(CurvaturePath::sampled(samples, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn plans_vanish_off_the_support(center in 0.2f64..0.8, rho in 0.0f64..0.05, sample in 0usize..50) {
        let path = CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), 400).unwrap();
        let o = opts(400, vec![Avoidance::new(center, rho)]);
        let setup = PerturbationSetup::new(&path, &o).unwrap();
        let target = sweep_target(&setup, 1e-3, 8, sample).unwrap();
        let plan = setup.solve(&target).unwrap();
        let support = setup.mask.support();
        for j in 0..=plan.u.intervals() {
            let t = plan.u.time(j);
            if !support.contains(t) {
                prop_assert!(plan.u.sample(j).iter().all(|&v| v == 0.0));
            }
        }
        prop_assert!(matches!(plan.u.support(), Support::Within(_)));
    }
}
