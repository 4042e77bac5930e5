//! The symplectic group `Sp(m)` and its tangent spaces.
//!
//! A `2m x 2m` real matrix `X` is symplectic when `Xᵀ J X = J`, with
//! `J = [[0, I_m], [-I_m, 0]]`. The tangent space at `X` is
//! `{ Y : Xᵀ J Y symmetric }`, which has dimension `m(2m+1)`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::max_abs;
use crate::{Error, Result};

/// Default membership tolerance on `‖XᵀJX − J‖_max`.
pub const DEFAULT_TOL_SYMP: f64 = 1e-9;

const REPROJECT_MAX_ITER: usize = 50;
const REPROJECT_MAX_DEFECT: f64 = 0.5;

/// The standard symplectic form `J` of size `2m`.
pub fn standard_form(m: usize) -> DMatrix<f64> {
    let n = 2 * m;
    let mut j = DMatrix::zeros(n, n);
    for i in 0..m {
        j[(i, m + i)] = 1.0;
        j[(m + i, i)] = -1.0;
    }
    j
}

/// Dimension `m(2m+1)` of `Sp(m)`.
pub fn group_dimension(m: usize) -> usize {
    m * (2 * m + 1)
}

/// Half-dimension of an even square matrix.
pub fn half_dimension(x: &DMatrix<f64>) -> Result<usize> {
    if x.nrows() != x.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            x.nrows(),
            x.ncols()
        )));
    }
    if x.nrows() == 0 || !x.nrows().is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "expected a positive even dimension, got {}",
            x.nrows()
        )));
    }
    Ok(x.nrows() / 2)
}

/// Returns `‖XᵀJX − J‖_max`.
pub fn symplectic_defect(x: &DMatrix<f64>) -> Result<f64> {
    let m = half_dimension(x)?;
    Ok(defect_unchecked(x, &standard_form(m)))
}

fn defect_unchecked(x: &DMatrix<f64>, j: &DMatrix<f64>) -> f64 {
    max_abs(&(x.transpose() * j * x - j))
}

/// Canonical basis of symmetric `n x n` matrices: `E_aa` for every `a`, then
/// `E_ab + E_ba` for `a < b` in lexicographic order.
pub fn symmetric_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        let mut e = DMatrix::zeros(n, n);
        e[(a, a)] = 1.0;
        out.push(e);
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let mut e = DMatrix::zeros(n, n);
            e[(a, b)] = 1.0;
            e[(b, a)] = 1.0;
            out.push(e);
        }
    }
    out
}

/// Coordinates of a symmetric matrix in [`symmetric_basis`] order.
pub fn symmetric_coordinates(s: &DMatrix<f64>) -> DVector<f64> {
    let n = s.nrows();
    let mut c = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        c.push(s[(a, a)]);
    }
    for a in 0..n {
        for b in (a + 1)..n {
            c.push(0.5 * (s[(a, b)] + s[(b, a)]));
        }
    }
    DVector::from_vec(c)
}

/// A matrix certified to lie on `Sp(m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticMatrix {
    m: usize,
    entries: DMatrix<f64>,
}

impl SymplecticMatrix {
    /// Certifies `entries` with the default tolerance.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(entries, DEFAULT_TOL_SYMP)
    }

    pub fn with_tolerance(entries: DMatrix<f64>, tol: f64) -> Result<Self> {
        let m = half_dimension(&entries)?;
        let defect = defect_unchecked(&entries, &standard_form(m));
        if !(defect <= tol) {
            return Err(Error::NotSymplectic { defect, tol });
        }
        Ok(Self { m, entries })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            m,
            entries: DMatrix::identity(2 * m, 2 * m),
        }
    }

    /// `J` itself, which is symplectic.
    pub fn standard_form(m: usize) -> Self {
        Self {
            m,
            entries: standard_form(m),
        }
    }

    pub(crate) fn from_trusted(m: usize, entries: DMatrix<f64>) -> Self {
        debug_assert_eq!(entries.nrows(), 2 * m);
        Self { m, entries }
    }

    pub fn half_dim(&self) -> usize {
        self.m
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn defect(&self) -> f64 {
        defect_unchecked(&self.entries, &standard_form(self.m))
    }

    /// Group inverse `X⁻¹ = −J Xᵀ J`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let j = standard_form(self.m);
        -(&j * self.entries.transpose() * &j)
    }

    /// Group product.
    pub fn compose(&self, other: &SymplecticMatrix) -> SymplecticMatrix {
        SymplecticMatrix::from_trusted(self.m, &self.entries * &other.entries)
    }
}

/// A matrix `Y` tangent to `Sp(m)` at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: SymplecticMatrix,
    entries: DMatrix<f64>,
}

impl TangentVector {
    pub fn new(base: SymplecticMatrix, entries: DMatrix<f64>, tol: f64) -> Result<Self> {
        if entries.shape() != base.entries.shape() {
            return Err(Error::Dimension(format!(
                "tangent vector shape {:?} does not match base {:?}",
                entries.shape(),
                base.entries.shape()
            )));
        }
        let defect = tangency_defect(base.entries(), &entries);
        if !(defect <= tol) {
            return Err(Error::Dimension(format!(
                "matrix is not tangent at the base point (defect {defect:.3e})"
            )));
        }
        Ok(Self { base, entries })
    }

    pub fn base(&self) -> &SymplecticMatrix {
        &self.base
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Coordinates with respect to [`tangent_basis`] at the same base.
    pub fn coordinates(&self) -> DVector<f64> {
        tangent_coordinates(self.base.entries(), &self.entries)
    }
}

/// `‖S − Sᵀ‖_max` for `S = XᵀJY`.
pub fn tangency_defect(base: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let m = base.nrows() / 2;
    let s = base.transpose() * standard_form(m) * y;
    max_abs(&(&s - s.transpose()))
}

/// Coordinates of `Y ∈ T_X Sp(m)` in the basis produced by [`tangent_basis`].
pub fn tangent_coordinates(base: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    let m = base.nrows() / 2;
    symmetric_coordinates(&(base.transpose() * standard_form(m) * y))
}

/// Basis of `T_X Sp(m)`: `Y = X·(−J S)` for each canonical symmetric `S`.
pub fn tangent_basis(base: &SymplecticMatrix) -> Vec<TangentVector> {
    let m = base.half_dim();
    let minus_j = -standard_form(m);
    symmetric_basis(2 * m)
        .into_iter()
        .map(|s| TangentVector {
            base: base.clone(),
            entries: base.entries() * &minus_j * s,
        })
        .collect()
}

/// Pulls a near-symplectic matrix back onto the group.
///
/// Applies `X ← X(I + ½ J e)` with `e = XᵀJX − J`, which cancels the defect
/// to first order, until the defect is at most `tol` (then keeps polishing
/// while the defect still halves).
pub fn reproject(x: &DMatrix<f64>, tol: f64) -> Result<SymplecticMatrix> {
    let m = half_dimension(x)?;
    let j = standard_form(m);
    let id = DMatrix::<f64>::identity(2 * m, 2 * m);
    let mut cur = x.clone();
    let mut defect = defect_unchecked(&cur, &j);
    if !(defect < REPROJECT_MAX_DEFECT) {
        return Err(Error::ProjectionFailure { iterations: 0, defect });
    }
    for _ in 0..REPROJECT_MAX_ITER {
        if defect == 0.0 {
            break;
        }
        let e = cur.transpose() * &j * &cur - &j;
        let next = &cur * (&id + 0.5 * &j * e);
        let next_defect = defect_unchecked(&next, &j);
        if defect <= tol && !(next_defect < 0.5 * defect) {
            break;
        }
        cur = next;
        defect = next_defect;
        if !defect.is_finite() || defect >= REPROJECT_MAX_DEFECT {
            break;
        }
    }
    if defect <= tol {
        Ok(SymplecticMatrix { m, entries: cur })
    } else {
        Err(Error::ProjectionFailure {
            iterations: REPROJECT_MAX_ITER,
            defect,
        })
    }
}
