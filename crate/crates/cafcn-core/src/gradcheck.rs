//! Central finite differences for verifying analytic gradients.
//!
//! `central_diff` perturbs each coordinate of a flat parameter slice and
//! evaluates the scalar objective twice, so it stays independent of whatever
//! backward pass it is checking.

/// Central finite-difference gradient of `f` at `x` with the given step.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
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

/// Relative error between two gradient entries with a floor that keeps
/// finite-difference noise on near-zero gradients from dominating.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest entrywise relative error between two gradient slices.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}
