//! Central finite differences, used as an independent reference for the
//! analytic gradients in tests.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest violation of `|a − n| ≤ rtol·max(|a|, |n|) + atol`, reported as
/// `(index, analytic, numeric)`, or `None` when every entry passes.
pub fn worst_mismatch(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let excess = (a - n).abs() - (rtol * a.abs().max(n.abs()) + atol);
        if excess > 0.0 && worst.is_none_or(|w| excess > w.3) {
            worst = Some((i, a, n, excess));
        }
    }
    worst.map(|(i, a, n, _)| (i, a, n))
}

/// Panics with a readable message when the two gradients disagree.
pub fn assert_gradients_match(what: &str, analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) {
    if let Some((i, a, n)) = worst_mismatch(analytic, numeric, rtol, atol) {
        panic!("{what}: gradient mismatch at {i}: analytic {a:e} vs numeric {n:e} (rtol {rtol:e})");
    }
}
