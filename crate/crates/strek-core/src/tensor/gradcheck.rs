//! Central finite-difference gradient checking, shared by the test suites.

/// Numeric gradient of `f` at `x` using central differences with step `h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F, h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let x0 = probe[i];
        probe[i] = x0 + h;
        let fp = f(&probe);
        probe[i] = x0 - h;
        let fm = f(&probe);
        probe[i] = x0;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Worst relative disagreement between two gradients, with an absolute
/// floor below which differences are ignored.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(abs_floor)
            }
        })
        .fold(0.0, f64::max)
}
