#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sympsteer::bilinear::{AffineCoefficient, BilinearSystem, ControlSignal, Support};
use sympsteer::symplectic::standard_form;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale));
    (&a + a.transpose()) * 0.5
}

/// `J·S` for symmetric `S` is Hamiltonian.
pub fn hamiltonian(s: &DMatrix<f64>) -> DMatrix<f64> {
    let m = s.nrows() / 2;
    standard_form(m) * s
}

/// Random affine drift and `k` constant channels, all Hamiltonian.
pub fn random_system(rng: &mut ChaCha8Rng, m: usize, k: usize) -> BilinearSystem {
    let n = 2 * m;
    let offset = hamiltonian(&random_symmetric(rng, n, 1.0));
    let slope = hamiltonian(&random_symmetric(rng, n, 0.5));
    let controls = (0..k).map(|_| hamiltonian(&random_symmetric(rng, n, 1.0))).collect();
    BilinearSystem::new(1.0, Arc::new(AffineCoefficient { offset, slope }), controls).unwrap()
}

/// Smooth random control: a few sinusoids per channel.
pub fn random_control(rng: &mut ChaCha8Rng, k: usize, steps: usize, amplitude: f64) -> ControlSignal {
    let coeffs: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            [
                rng.random_range(-amplitude..amplitude),
                rng.random_range(-amplitude..amplitude),
                rng.random_range(0.5..4.0),
            ]
        })
        .collect();
    ControlSignal::from_fn(k, steps, 1.0, Support::Unrestricted, |t| {
        coeffs
            .iter()
            .map(|c| c[0] * (c[2] * t).sin() + c[1] * (2.0 * c[2] * t).cos())
            .collect()
    })
}

/// Rank of a list of vectors by Gaussian elimination with partial pivoting,
/// relative to the largest entry.
pub fn gaussian_rank(vectors: &[Vec<f64>], tol_rel: f64) -> usize {
    if vectors.is_empty() {
        return 0;
    }
    let mut rows: Vec<Vec<f64>> = vectors.to_vec();
    let cols = rows[0].len();
    let scale = rows.iter().flat_map(|r| r.iter()).fold(0.0f64, |a, &b| a.max(b.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = tol_rel * scale;
    let mut rank = 0;
    for c in 0..cols {
        let pivot = (rank..rows.len()).max_by(|&a, &b| rows[a][c].abs().total_cmp(&rows[b][c].abs()));
        let Some(p) = pivot else { break };
        if rows[p][c].abs() <= tol {
            continue;
        }
        rows.swap(rank, p);
        for r in 0..rows.len() {
            if r != rank {
                let f = rows[r][c] / rows[rank][c];
                if f != 0.0 {
                    let pivot_row = rows[rank].clone();
                    for (x, p) in rows[r][c..].iter_mut().zip(&pivot_row[c..]) {
                        *x -= f * p;
                    }
                }
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    rank
}

pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}
