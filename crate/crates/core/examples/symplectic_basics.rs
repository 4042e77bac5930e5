//! Group membership, tangent coordinates and reprojection back onto Sp(m).

use nalgebra::DMatrix;
use sympsteer::symplectic::{
    group_dimension, reproject, symplectic_defect, tangent_basis, tangent_coordinates, SymplecticMatrix,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let m = 2;
    // A shear followed by a rotation in the first conjugate pair.
    let mut shear = DMatrix::identity(4, 4);
    shear[(0, 2)] = 0.7;
    shear[(1, 3)] = -0.2;
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let mut rot = DMatrix::identity(4, 4);
    rot[(0, 0)] = c;
    rot[(0, 2)] = s;
    rot[(2, 0)] = -s;
    rot[(2, 2)] = c;
    let x = SymplecticMatrix::new(&shear * &rot)?;
    println!("defect of shear*rotation: {:.2e}", x.defect());

    let basis = tangent_basis(&x);
    println!(
        "tangent basis size {} (group dimension {})",
        basis.len(),
        group_dimension(m)
    );
    let coords = tangent_coordinates(x.entries(), basis[3].entries());
    println!("coordinates of basis[3]: {:?}", coords.as_slice());

    let bumped = x.entries() + DMatrix::from_fn(4, 4, |i, j| 1e-4 * ((i * 4 + j) as f64).sin());
    println!("defect after a 1e-4 bump: {:.2e}", symplectic_defect(&bumped)?);
    let fixed = reproject(&bumped, 1e-12)?;
    println!(
        "after reprojection: defect {:.2e}, moved {:.2e}",
        fixed.defect(),
        (fixed.entries() - &bumped).norm()
    );

    let inv = fixed.inverse();
    println!(
        "|X X^-1 - I| = {:.2e}",
        (fixed.entries() * inv - DMatrix::identity(4, 4)).norm()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
