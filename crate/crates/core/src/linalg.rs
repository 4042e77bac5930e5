//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Column-major vectorization of a matrix.
pub(crate) fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Largest absolute entry.
pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Singular values in descending order.
pub(crate) fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Count of singular values above `tol_rel * sigma_max`.
pub(crate) fn relative_rank(sv: &[f64], tol_rel: f64) -> usize {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol_rel * smax).count()
}

/// Stack vectorized matrices as the columns of one matrix.
pub(crate) fn stack_columns<'a, I>(mats: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let cols: Vec<DVector<f64>> = mats.into_iter().map(vectorize).collect();
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_columns(&cols)
}
