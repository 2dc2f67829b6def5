use super::AdError;

/// Central finite-difference gradient of `f` at `params`.
///
/// Each coordinate is perturbed in place and restored, so `f` sees exactly
/// `params` apart from the one coordinate under test.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>, AdError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !eps.is_finite() || eps <= 0.0 {
        return Err(AdError::InvalidEpsilon(eps));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work);
        work[i] = orig - eps;
        let minus = f(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AdError::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error between two gradient vectors.
///
/// The denominator of coordinate `i` is `max(|a_i|, |b_i|, 1e-3 * max_j |a_j|)`:
/// coordinates far below the gradient's own scale are judged against that
/// scale instead of against their own (noise-dominated) magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}
