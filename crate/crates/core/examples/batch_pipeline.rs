//! The analyze, steer and verify commands driven from a spec file in a
//! temporary directory.

use std::fs;

use sympsteer::cli::{cmd_analyze, cmd_steer, cmd_verify, format_matrix, AnalyzeArgs, SteerArgs, VerifyArgs};
use sympsteer::franks::PerturbationSetup;
use sympsteer::symplectic::reproject;

const SPEC: &str = r#"
m = 2

[curvature]
preset = "diagonal-affine"
offset = [1.0, 2.0]
slope = [0.0, 0.0]

[numerics]
steps = 400
"#;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("sympsteer-batch-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    let spec_path = dir.join("system.toml");
    fs::write(&spec_path, SPEC)?;

    let analyze = cmd_analyze(&AnalyzeArgs {
        spec: spec_path.clone(),
        depth: None,
        tol: None,
        overrides: Default::default(),
        out: None,
    })?;
    println!(
        "analyze: exit {} rank {}",
        analyze.exit_code, analyze.outputs["rank"]["achieved"]
    );

    let spec = sympsteer::cli::SystemSpecFile::parse(SPEC)?;
    let setup = PerturbationSetup::new(&spec.curvature_path()?, &spec.synthesis_options(&Default::default()))?;
    let mut shifted = setup.unperturbed().entries().clone();
    shifted[(0, 1)] += 2e-3;
    let target = reproject(&shifted, 1e-13)?;
    let target_path = dir.join("target.txt");
    fs::write(&target_path, format_matrix(target.entries()))?;

    let control_path = dir.join("control.csv");
    let steer = cmd_steer(&SteerArgs {
        spec: spec_path.clone(),
        target: target_path.clone(),
        out: control_path.clone(),
        overrides: Default::default(),
    })?;
    println!(
        "steer: residual {} in {} iterations",
        steer.outputs["residual"], steer.outputs["iterations"]
    );

    let verify = cmd_verify(&VerifyArgs {
        spec: spec_path,
        control: control_path,
        target: target_path,
        tol: None,
        overrides: Default::default(),
    })?;
    println!(
        "verify: exit {} residual {}",
        verify.exit_code, verify.outputs["residual"]
    );
    fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
