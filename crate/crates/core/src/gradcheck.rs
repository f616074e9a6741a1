//! Central finite-difference gradient oracle.
//!
//! Used by the test suites to check analytic gradients. Depends only on
//! repeated forward evaluation, never on the reverse-mode path it verifies.

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Max relative error between analytic and numeric gradients.
///
/// Entries are measured against their own magnitude, floored at 1% of the
/// largest gradient entry so finite-difference roundoff on near-zero entries
/// does not dominate the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(0.01 * scale))
        .fold(0.0, f64::max)
}
