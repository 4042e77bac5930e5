//! Bracket-table rank of the curvature control system for a few curvature
//! profiles.

use nalgebra::DMatrix;
use sympsteer::controllability::{bracket_table, scan_times, span_rank, DEFAULT_TOL_RANK};
use sympsteer::franks::{jacobi_system, CurvaturePath};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cases = [
        (
            "m=1, K=1",
            CurvaturePath::constant(DMatrix::from_element(1, 1, 1.0), 200)?,
        ),
        (
            "m=2, K=diag(1,2)",
            CurvaturePath::diagonal_affine(vec![1.0, 2.0], vec![0.0, 0.0], 200)?,
        ),
        ("m=2, K=I", CurvaturePath::constant(DMatrix::identity(2, 2), 200)?),
        (
            "m=3, K=diag(1,2,3)",
            CurvaturePath::diagonal_affine(vec![1.0, 2.0, 3.0], vec![0.0; 3], 200)?,
        ),
    ];
    for (name, path) in cases {
        let sys = jacobi_system(&path)?;
        let table = bracket_table(&sys, 0.5, 3)?;
        let report = span_rank(&table, DEFAULT_TOL_RANK)?;
        println!(
            "{name:>20}: rank {}/{} at t=0.5, smallest retained singular value {:.3e}",
            report.achieved,
            report.required,
            report.smallest_retained()
        );
    }

    // Eigenvalues cross at t=0; the scan moves away from the crossing.
    let path = CurvaturePath::diagonal_affine(vec![1.0, 1.0], vec![0.0, 1.0], 200)?;
    let sys = jacobi_system(&path)?;
    let times: Vec<f64> = (0..=20).map(|j| j as f64 / 20.0).collect();
    let report = scan_times(&sys, &times, 3, DEFAULT_TOL_RANK)?;
    println!(
        "K=diag(1,1+t): rank {}/{} best at t={}",
        report.achieved, report.required, report.best_time
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
