//! Builds a trace-pairing control basis on a window and steers the end point
//! to a nearby symplectic target with Gauss-Newton.

use nalgebra::DMatrix;
use sympsteer::bilinear::{propagate_with, ControlSignal, Interval, PropagateOptions};
use sympsteer::franks::{jacobi_system, CurvaturePath};
use sympsteer::steering::{build_basis, newton_steer, norm_certificate, BasisOptions, SteerOptions, SupportMask};
use sympsteer::symplectic::{reproject, SymplecticMatrix};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let steps = 400;
    let path = CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), steps)?;
    let sys = jacobi_system(&path)?;
    let x0 = SymplecticMatrix::identity(1);
    let reference = ControlSignal::zeros(1, steps, 1.0);
    let propagate = PropagateOptions {
        with_fundamental: true,
        ..PropagateOptions::with_steps(steps)
    };
    let base = propagate_with(&sys, &x0, &reference, &propagate)?;

    let mask = SupportMask::window(Interval::new(0.2, 0.8));
    let basis_opts = BasisOptions {
        propagate: propagate.clone(),
        ..BasisOptions::default()
    };
    let basis = build_basis(&sys, &x0, &reference, &base, &mask, &basis_opts)?;
    println!(
        "basis of {} controls, Gramian conditioning {:.3e}",
        basis.size(),
        basis.conditioning()
    );

    let s = base.endpoint().entries();
    let nudge = DMatrix::from_row_slice(2, 2, &[0.01, -0.02, 0.015, 0.0]);
    let target = reproject(&(s + nudge), 1e-13)?;
    let sol = newton_steer(
        &sys,
        &basis,
        &target,
        &SteerOptions {
            propagate: PropagateOptions::with_steps(steps),
            ..SteerOptions::default()
        },
    )?;
    println!(
        "converged in {} iterations, residual {:.2e}, |u|_C0 = {:.4}, |u|_C2 = {:.4}",
        sol.iterations,
        sol.residual,
        norm_certificate(&sol, 0),
        norm_certificate(&sol, 2)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
