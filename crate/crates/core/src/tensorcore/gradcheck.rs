//! Central finite-difference gradient checking. Test support: the numeric
//! route here is independent of the tape's backward pass.

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Largest elementwise relative error between analytic and numeric
/// gradients, with a small absolute floor so near-zero entries compare
/// on an absolute scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs().max(n.abs()) + 1e-6))
        .fold(0.0, f64::max)
}
