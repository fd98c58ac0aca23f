use crate::error::{Result, TrfError};

/// Central-difference gradient `(f(x+ε) - f(x-ε)) / 2ε`, one coordinate at a
/// time. Used as the independent oracle for every hand-written backward pass.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(TrfError::Domain(format!("finite-difference step {eps} must be positive")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TrfError::NonFinite(format!("function value at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Denominator floor for [`relative_error`] in gradient checks. Central
/// differences at ε = 1e-6 carry ~1e-10 of round-off, so a gradient entry
/// of 1e-6 cannot be checked to 1e-4 relative without a floor.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
