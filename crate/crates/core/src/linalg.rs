//! Small dense linear-algebra helpers shared by the localizers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value threshold defining linear independence.
pub const RANK_TOL: f64 = 1e-8;

/// Relative eigenvalue threshold below which a Gram direction is treated as null.
pub const GRAM_NULL_TOL: f64 = 1e-10;

/// Orthonormal basis for `span(a)`, with `a` required to have full column rank.
///
/// Rank is judged by `σ_min > RANK_TOL · σ_max`; on failure the error names
/// the columns whose Householder pivots fall under the threshold.
pub fn full_rank_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, k) = a.shape();
    if k == 0 {
        return Ok(DMatrix::zeros(m, 0));
    }
    if k > m {
        return Err(Error::Degenerate(format!("{k} columns cannot be independent in {m} dimensions")));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in topography matrix".into()));
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let qr = a.clone().qr();
    let r = qr.r();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        let pivot_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let bad: Vec<usize> = (0..k).filter(|&i| r[(i, i)].abs() <= RANK_TOL * pivot_max.max(f64::MIN_POSITIVE)).collect();
        return Err(Error::Degenerate(format!(
            "topography columns {bad:?} are linearly dependent (σmin/σmax = {})",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    Ok(qr.q().columns(0, k).into_owned())
}

/// Orthonormal basis for the numerical range of `a`, dropping directions with
/// singular value below `rel_tol · σ_max`. Columns are ordered by singular
/// value, largest first, and at most `max_rank` are kept.
pub fn range_basis(a: &DMatrix<f64>, rel_tol: f64, max_rank: usize) -> DMatrix<f64> {
    let m = a.nrows();
    if a.ncols() == 0 || max_rank == 0 {
        return DMatrix::zeros(m, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > rel_tol * smax)
        .take(max_rank)
        .collect();
    let mut out = DMatrix::zeros(m, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &u.column(i));
    }
    out
}

/// Symmetric eigen-decomposition with eigenvalues sorted descending.
pub fn sorted_eigen(c: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(c.nrows(), n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Largest generalized eigenpair of the symmetric pencil `(num, gram)`:
/// `max_v (vᵀ num v) / (vᵀ gram v)`.
///
/// The search is restricted to the range of `gram` (eigenvalues above
/// `GRAM_NULL_TOL · λ_max`). Returns `None` when `λ_max(gram) <= abs_floor`.
/// The returned vector is unit-norm.
pub fn max_generalized_eigen(num: &DMatrix<f64>, gram: &DMatrix<f64>, abs_floor: f64) -> Option<(f64, DVector<f64>)> {
    let (gvals, gvecs) = sorted_eigen(gram);
    let gmax = gvals[0];
    if !(gmax > abs_floor) || !gmax.is_finite() {
        return None;
    }
    let rank = gvals.iter().take_while(|&&v| v > GRAM_NULL_TOL * gmax).count();
    let mut whiten = DMatrix::zeros(gram.nrows(), rank);
    for i in 0..rank {
        whiten.set_column(i, &(gvecs.column(i) / gvals[i].sqrt()));
    }
    let reduced = whiten.transpose() * num * &whiten;
    let (rvals, rvecs) = sorted_eigen(&reduced);
    let v = &whiten * rvecs.column(0);
    let norm = v.norm();
    if !(norm > 0.0) {
        return None;
    }
    Some((rvals[0], v / norm))
}
