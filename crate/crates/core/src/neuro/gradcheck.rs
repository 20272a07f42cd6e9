/// Denominator floor for relative errors. Central differences at step
/// `1e-5` carry absolute round-off near `1e-11 * |f|`, so entries whose
/// true derivative is below this floor are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
