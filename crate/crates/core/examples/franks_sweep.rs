//! Estimates the linear norm bound of the perturbation by sweeping random
//! targets at several radii.

use sympsteer::franks::{sweep, CurvaturePath, SweepOptions, SynthesisOptions};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let steps = 400;
    let path = CurvaturePath::constant(nalgebra::DMatrix::from_element(1, 1, 1.0), steps)?;
    let synth = SynthesisOptions {
        steps,
        ..SynthesisOptions::default()
    };
    let table = sweep(
        &path,
        &synth,
        &SweepOptions {
            radii: vec![1e-4, 1e-3, 1e-2],
            samples: 8,
            seed: 11,
            threads: None,
        },
    )?;
    for r in &table.radii {
        println!(
            "r = {:.0e}: {}/{} solved, max |u|_C2 / r = {:.3}",
            r.radius, r.solved, r.samples, r.max_ratio
        );
    }
    println!(
        "log-log slope {:.3}, admissible constant {:.3e}, radius bound {:?}",
        table.slope, table.k_est, table.radius_bound
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
