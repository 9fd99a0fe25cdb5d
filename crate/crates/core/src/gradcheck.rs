//! Central finite differences and the relative error measure used by the
//! gradient checks.

/// Step used by the gradient checks.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor matched to [`DEFAULT_STEP`].
pub const NOISE_FLOOR: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// Relative error with a caller-chosen denominator floor. With a step of
/// 1e-6 central differences carry roundoff near 1e-10 on O(1) losses, so a
/// floor of 1e-5 keeps gradients smaller than that from being judged
/// against pure noise.
pub fn relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / inf(analytic).max(inf(numeric)).max(floor)
}
