//! Central finite differences for validating analytic gradients.
//!
//! Used by the test suites for every layer and loss in the crate; exposed
//! publicly so downstream extensions can run the same check.

/// Numerical gradient of `f` at `x` via central differences with `step`.
pub fn central_diff(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let fp = f(&buf);
        buf[i] = orig - step;
        let fm = f(&buf);
        buf[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst-case relative error between two gradient vectors.
///
/// The denominator is floored at 1e-6 so components where both gradients
/// vanish compare by absolute difference instead of dividing by zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0_f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Whole-vector relative error `||a - n|| / max(||a||, ||n||)`.
///
/// Preferred over [`max_rel_err`] when the objective passes through deep
/// ReLU chains: a finite-difference probe can flip an isolated unit across
/// its kink and corrupt single components, while an actual backward bug
/// shifts the vector as a whole.
pub fn vec_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}
