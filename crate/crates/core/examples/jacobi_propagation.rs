//! Propagates the Jacobi system of a constant-curvature arc, with and without
//! a curvature perturbation, and checks the end-point differential against a
//! finite difference.

use nalgebra::DMatrix;
use sympsteer::bilinear::{endpoint, endpoint_differential, propagate_with, ControlSignal, PropagateOptions, Support};
use sympsteer::franks::{jacobi_system, linearized_poincare, CurvaturePath};
use sympsteer::symplectic::SymplecticMatrix;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let steps = 400;
    let path = CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), steps)?;
    let sys = jacobi_system(&path)?;
    let x0 = SymplecticMatrix::identity(1);

    let zero = ControlSignal::zeros(1, steps, 1.0);
    let p = linearized_poincare(&path, &zero, steps)?;
    let exact = DMatrix::from_row_slice(2, 2, &[1f64.cos(), 1f64.sin(), -1f64.sin(), 1f64.cos()]);
    println!(
        "unit-curvature map error vs rotation: {:.2e}",
        (p.entries() - exact).norm()
    );

    let bump = ControlSignal::from_fn(1, steps, 1.0, Support::Unrestricted, |t| vec![(3.0 * t).sin()]);
    let opts = PropagateOptions {
        with_fundamental: true,
        ..PropagateOptions::with_steps(steps)
    };
    let traj = propagate_with(&sys, &x0, &zero, &opts)?;
    println!("max defect along the trajectory: {:.2e}", traj.max_defect());

    let y = endpoint_differential(&sys, &traj, &bump)?;
    let eps = 1e-5;
    let plus = endpoint(&sys, &x0, &bump.scaled(eps), steps)?;
    let minus = endpoint(&sys, &x0, &bump.scaled(-eps), steps)?;
    let fd = (plus.entries() - minus.entries()) / (2.0 * eps);
    println!(
        "differential vs central difference: relative error {:.2e}",
        (&y - &fd).norm() / fd.norm()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
