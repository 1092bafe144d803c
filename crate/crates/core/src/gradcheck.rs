//! Central finite differences for checking analytic gradients.

use ndarray::Array2;

/// Step used by the checks: (f(x + h) − f(x − h)) / 2h.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries whose magnitudes are both below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` at `x`, one entry at a time.
pub fn central_difference(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    grad
}

/// max_i |a_i − n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR).
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}
