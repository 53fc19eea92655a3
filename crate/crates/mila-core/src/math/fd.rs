//! Central-difference gradients, the reference every analytic gradient in
//! this crate is checked against.

use crate::error::{Error, Result};

/// Gradient of `f` at `point` by central differences with step `h`.
///
/// `f` may fail; the error propagates. A non-finite loss value is rejected
/// with the coordinate index that produced it.
pub fn fd_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::domain(format!("fd_gradient: step {h} not positive")));
    }
    let mut x = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "fd_gradient: coordinate {i} gave ({plus}, {minus})"
            )));
        }
        grad[i] = g;
    }
    Ok(grad)
}
