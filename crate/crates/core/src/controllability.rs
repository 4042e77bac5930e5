//! First-order controllability through iterated brackets.
//!
//! For each channel the sequence `B⁰ = Bᵢ`, `Bʲ = Ḃʲ⁻¹ + Bʲ⁻¹A − ABʲ⁻¹` is
//! evaluated at a single time `t̄`. If the brackets span the tangent space
//! `T_I Sp(m)` (dimension `m(2m+1)`), the end-point map is a submersion at the
//! zero control.
//!
//! The time derivatives are carried exactly: each `Bʲ` is represented by its
//! Taylor jet at `t̄`, propagated with the Leibniz rule from the jet of `A`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearSystem, DEFAULT_STEPS};
use crate::linalg::{relative_rank, singular_values_desc, stack_columns};
use crate::symplectic::group_dimension;
use crate::{Error, Result};

/// Default relative rank threshold on singular values.
pub const DEFAULT_TOL_RANK: f64 = 1e-9;

/// Brackets `Bᵢʲ(t̄)` for every channel `i` and order `j ≤ depth`.
#[derive(Debug, Clone)]
pub struct BracketTable {
    pub time: f64,
    pub depth: usize,
    /// `entries[i][j] = Bᵢʲ(t̄)`.
    pub entries: Vec<Vec<DMatrix<f64>>>,
}

impl BracketTable {
    pub fn channels(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, channel: usize, order: usize) -> &DMatrix<f64> {
        &self.entries[channel][order]
    }

    /// All brackets of the given order, one per channel.
    pub fn order(&self, order: usize) -> Vec<&DMatrix<f64>> {
        self.entries.iter().map(|row| &row[order]).collect()
    }

    /// Copy restricted to orders `≤ depth`.
    pub fn truncated(&self, depth: usize) -> BracketTable {
        let depth = depth.min(self.depth);
        BracketTable {
            time: self.time,
            depth,
            entries: self.entries.iter().map(|row| row[..=depth].to_vec()).collect(),
        }
    }

    fn half_dim(&self) -> usize {
        self.entries
            .first()
            .and_then(|row| row.first())
            .map(|b| b.nrows() / 2)
            .unwrap_or(0)
    }
}

/// Outcome of the span test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub required: usize,
    pub achieved: usize,
    pub singular_values: Vec<f64>,
    pub best_time: f64,
    pub controllable: bool,
}

impl RankReport {
    /// Smallest singular value counted in the rank (zero if none).
    pub fn smallest_retained(&self) -> f64 {
        if self.achieved == 0 {
            0.0
        } else {
            self.singular_values[self.achieved - 1]
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Jet `[A, Ȧ, Ä, …]` of the drift at `t` up to `order`.
///
/// A missing second derivative is replaced by a centered difference of `Ȧ`
/// with the default grid step; any higher missing order is an error.
fn drift_jet(sys: &BilinearSystem, t: f64, order: usize, depth: usize) -> Result<Vec<DMatrix<f64>>> {
    let drift = sys.drift();
    let horizon = sys.horizon();
    (0..=order)
        .map(|d| match drift.derivative(t, d) {
            Some(a) => Ok(a),
            None if d == 2 => {
                let h = horizon / DEFAULT_STEPS as f64;
                let first = |s: f64| {
                    drift
                        .derivative(s, 1)
                        .ok_or(Error::InsufficientDerivatives { depth, order: 1 })
                };
                if t - h >= 0.0 && t + h <= horizon {
                    Ok((first(t + h)? - first(t - h)?) / (2.0 * h))
                } else if t + 2.0 * h <= horizon {
                    Ok((-3.0 * first(t)? + 4.0 * first(t + h)? - first(t + 2.0 * h)?) / (2.0 * h))
                } else {
                    Ok((3.0 * first(t)? - 4.0 * first(t - h)? + first(t - 2.0 * h)?) / (2.0 * h))
                }
            }
            None => Err(Error::InsufficientDerivatives { depth, order: d }),
        })
        .collect()
}

/// Evaluates the bracket recursion at `time` up to order `depth`.
pub fn bracket_table(sys: &BilinearSystem, time: f64, depth: usize) -> Result<BracketTable> {
    if !(0.0..=sys.horizon()).contains(&time) {
        return Err(Error::InvalidArgument(format!(
            "bracket time {time} outside [0, {}]",
            sys.horizon()
        )));
    }
    let jet = if depth == 0 {
        Vec::new()
    } else {
        drift_jet(sys, time, depth - 1, depth)?
    };
    let n = 2 * sys.half_dim();
    let entries = sys
        .control_matrices()
        .iter()
        .map(|b| {
            // current[d] = d-th time derivative of B^j at `time`
            let mut current: Vec<DMatrix<f64>> = (0..=depth)
                .map(|d| if d == 0 { b.clone() } else { DMatrix::zeros(n, n) })
                .collect();
            let mut row = Vec::with_capacity(depth + 1);
            row.push(b.clone());
            for j in 1..=depth {
                let next: Vec<DMatrix<f64>> = (0..=depth - j)
                    .map(|d| {
                        let mut acc = current[d + 1].clone();
                        for l in 0..=d {
                            let a = &jet[d - l];
                            let c = binomial(d, l);
                            acc += c * (&current[l] * a - a * &current[l]);
                        }
                        acc
                    })
                    .collect();
                row.push(next[0].clone());
                current = next;
            }
            row
        })
        .collect();
    Ok(BracketTable { time, depth, entries })
}

/// Numerical dimension of the span of all table entries.
pub fn span_rank(table: &BracketTable, tol_rank: f64) -> Result<RankReport> {
    let mats: Vec<&DMatrix<f64>> = table.entries.iter().flatten().collect();
    if mats.is_empty() {
        return Err(Error::Degenerate("bracket table is empty".into()));
    }
    let stacked = stack_columns(mats.iter().copied());
    let singular_values = singular_values_desc(&stacked);
    if singular_values.first().copied().unwrap_or(0.0) <= 0.0 {
        return Err(Error::Degenerate("all brackets vanish".into()));
    }
    let required = group_dimension(table.half_dim());
    let achieved = relative_rank(&singular_values, tol_rank).min(required);
    Ok(RankReport {
        required,
        achieved,
        singular_values,
        best_time: table.time,
        controllable: achieved == required,
    })
}

/// Searches `times` for the best bracket span: maximal rank, ties broken by
/// the largest smallest-retained singular value.
pub fn scan_times(sys: &BilinearSystem, times: &[f64], depth: usize, tol_rank: f64) -> Result<RankReport> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("no scan times given".into()));
    }
    let reports = times
        .par_iter()
        .map(|&t| bracket_table(sys, t, depth).and_then(|table| span_rank(&table, tol_rank)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = reports[0].clone();
    for r in reports.into_iter().skip(1) {
        let better = r.achieved > best.achieved
            || (r.achieved == best.achieved && r.smallest_retained() > best.smallest_retained());
        if better {
            best = r;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilinear::{AffineCoefficient, CoefficientPath, ConstantCoefficient};
    use crate::symplectic::standard_form;
    use std::sync::Arc;

    fn shear_channel() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])
    }

    #[test]
    fn base_order_is_the_control_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0, 0.0]);
        let sys = BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![shear_channel()]).unwrap();
        let table = bracket_table(&sys, 0.3, 2).unwrap();
        assert_eq!(table.entry(0, 0), &shear_channel());
    }

    #[test]
    fn affine_drift_picks_up_derivative_terms() {
        // A(t) = A0 + t A1, B constant: B² = [[B, A], A] + [B, A1]
        let a0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -2.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let path = AffineCoefficient {
            offset: a0.clone(),
            slope: a1.clone(),
        };
        let t = 0.4;
        let a = path.value(t);
        let sys = BilinearSystem::new(1.0, Arc::new(path), vec![b.clone()]).unwrap();
        let table = bracket_table(&sys, t, 2).unwrap();
        let comm = |x: &DMatrix<f64>, y: &DMatrix<f64>| x * y - y * x;
        let b1 = comm(&b, &a);
        let b2 = comm(&b1, &a) + comm(&b, &a1);
        assert!((table.entry(0, 1) - b1).amax() < 1e-14);
        assert!((table.entry(0, 2) - b2).amax() < 1e-14);
    }

    #[derive(Debug)]
    struct FirstOrderOnly;

    impl CoefficientPath for FirstOrderOnly {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, t: f64) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -(1.0 + t * t), 0.0])
        }
        fn derivative(&self, t: f64, order: usize) -> Option<DMatrix<f64>> {
            match order {
                0 => Some(self.value(t)),
                1 => Some(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -2.0 * t, 0.0])),
                _ => None,
            }
        }
    }

    #[test]
    fn depth_four_needs_third_derivative() {
        let sys = BilinearSystem::new(1.0, Arc::new(FirstOrderOnly), vec![shear_channel()]).unwrap();
        assert!(bracket_table(&sys, 0.5, 3).is_ok());
        let err = bracket_table(&sys, 0.5, 4).unwrap_err();
        assert!(matches!(err, Error::InsufficientDerivatives { depth: 4, order: 3 }));
        // finite-differenced second derivative of t² is exact up to roundoff
        let jet = drift_jet(&sys, 0.0, 2, 3).unwrap();
        assert!((jet[2][(1, 0)] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn zero_table_is_degenerate() {
        let table = BracketTable {
            time: 0.0,
            depth: 0,
            entries: vec![vec![DMatrix::zeros(2, 2)]],
        };
        assert!(matches!(span_rank(&table, DEFAULT_TOL_RANK), Err(Error::Degenerate(_))));
        let empty = BracketTable {
            time: 0.0,
            depth: 0,
            entries: vec![],
        };
        assert!(matches!(span_rank(&empty, DEFAULT_TOL_RANK), Err(Error::Degenerate(_))));
    }

    #[test]
    fn brackets_stay_hamiltonian_and_rank_grows_with_depth() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.0]);
        let sys = BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![shear_channel()]).unwrap();
        let j = standard_form(1);
        let table = bracket_table(&sys, 0.0, 4).unwrap();
        for b in table.entries.iter().flatten() {
            let s = &j * b;
            assert!((&s - s.transpose()).amax() < 1e-12);
        }
        let ranks: Vec<usize> = (0..=4)
            .map(|d| span_rank(&table.truncated(d), DEFAULT_TOL_RANK).unwrap().achieved)
            .collect();
        assert_eq!(ranks, vec![1, 2, 3, 3, 3]);
    }

    #[test]
    fn scan_rejects_bad_times() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let sys = BilinearSystem::new(1.0, Arc::new(ConstantCoefficient(a)), vec![shear_channel()]).unwrap();
        assert!(scan_times(&sys, &[], 2, DEFAULT_TOL_RANK).is_err());
        assert!(scan_times(&sys, &[1.5], 2, DEFAULT_TOL_RANK).is_err());
        let r = scan_times(&sys, &[0.0, 0.5], 2, DEFAULT_TOL_RANK).unwrap();
        assert!(r.controllable);
        assert_eq!(r.required, 3);
    }
}
