//! Central finite-difference oracle for verifying reverse-mode gradients.
//!
//! Deliberately independent of the tape's backward pass: it only calls a
//! user-supplied forward closure. Intended for 64-bit verification runs.

/// Central finite-difference gradient of `f` at `x`, one perturbed forward
/// pass per element and direction.
pub fn central_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement between two gradient vectors. The
/// denominator is floored at 1e-3 so near-zero entries are compared
/// absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
