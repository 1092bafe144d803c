//! Dense Cholesky helpers for the small symmetric systems built by the DPP code.

use ndarray::Array2;

/// Lower-triangular Cholesky factor of `a`, or `None` when a pivot is not
/// strictly positive.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// `log det(a)` from its Cholesky factor; `None` when `a` is not positive definite.
pub fn log_det_spd(a: &Array2<f64>) -> Option<f64> {
    let l = cholesky(a)?;
    Some((0..a.nrows()).map(|i| 2.0 * l[[i, i]].ln()).sum())
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn inverse_spd(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    // invert L by forward substitution, then A^{-1} = L^{-T} L^{-1}
    let mut linv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[[i, k]] * linv[[k, col]];
            }
            linv[[i, col]] = s / l[[i, i]];
        }
    }
    Some(linv.t().dot(&linv))
}

/// `a + jitter·I`.
pub fn add_jitter(a: &Array2<f64>, jitter: f64) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..out.nrows() {
        out[[i, i]] += jitter;
    }
    out
}
