//! Finite-difference gradient checking used across the loss and network
//! tests. All checks run in double precision with central differences.

/// Symmetric relative error between a numeric and an analytic derivative.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst relative error over all components, ignoring components where both
/// derivatives sit below `floor` (pure finite-difference noise).
pub fn max_relative_error(numeric: &[f64], analytic: &[f64], floor: f64) -> f64 {
    assert_eq!(numeric.len(), analytic.len());
    numeric
        .iter()
        .zip(analytic.iter())
        .map(|(&n, &a)| {
            if n.abs() < floor && a.abs() < floor {
                0.0
            } else {
                relative_error(n, a)
            }
        })
        .fold(0.0, f64::max)
}
