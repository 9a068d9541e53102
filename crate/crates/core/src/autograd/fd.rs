//! Central finite differences, the reference for every gradient check.

/// Perturbation used by the gradient checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `∂f/∂x_j ≈ (f(x + h·e_j) − f(x − h·e_j)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + step;
            let up = f(&probe);
            probe[j] = orig - step;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Same as [`central_difference`] restricted to `coords`.
pub fn central_difference_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&j| {
            let orig = probe[j];
            probe[j] = orig + step;
            let up = f(&probe);
            probe[j] = orig - step;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(analytic).max(scale(numeric));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
