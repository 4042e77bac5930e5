//! Realizes a nearby Poincaré map by a curvature perturbation supported on
//! the end of the arc, away from a protected neighbourhood.

use nalgebra::DMatrix;
use sympsteer::franks::{max_avoidance_half_width, synthesize, CurvaturePath, PerturbationSetup, SynthesisOptions};
use sympsteer::steering::Avoidance;
use sympsteer::symplectic::reproject;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let steps = 400;
    let path = CurvaturePath::diagonal_affine(vec![1.0, 2.0], vec![0.0, 0.0], steps)?;
    let opts = SynthesisOptions {
        steps,
        avoided: vec![Avoidance::new(0.5, 0.02)],
        ..SynthesisOptions::default()
    };
    let setup = PerturbationSetup::new(&path, &opts)?;
    println!(
        "window {:?}, eigenvalue gap {:?} at t={}",
        setup.mask.window, setup.contreras.min_gap, setup.contreras.best_time
    );

    let s = setup.unperturbed().entries().clone();
    let nudge = DMatrix::from_fn(4, 4, |i, j| 1e-3 * (1.0 + i as f64 - 0.5 * j as f64));
    let target = reproject(&(&s + nudge), 1e-13)?;
    let plan = synthesize(&path, &target, &opts)?;
    println!(
        "residual {:.2e} after {} iterations, |u|_C2 = {:.4}",
        plan.residual,
        plan.iterations,
        plan.norms[..=2].iter().copied().fold(0.0, f64::max)
    );
    let quiet = (0..=plan.u.intervals())
        .filter(|&j| (plan.u.time(j) - 0.5).abs() <= 0.02)
        .all(|j| plan.u.sample(j).iter().all(|&v| v == 0.0));
    println!("control vanishes on [0.48, 0.52]: {quiet}");

    let rho = max_avoidance_half_width(
        &path,
        0.5,
        &SynthesisOptions {
            steps,
            ..SynthesisOptions::default()
        },
        0.4,
        8,
    )?;
    println!("largest avoidable half-width around t=0.5: {rho:.4}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
