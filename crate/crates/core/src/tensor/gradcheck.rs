//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate. Deliberately knows nothing about the tape:
//! it only re-runs a closure at perturbed inputs.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Worst relative error between an analytic and a numeric gradient.
/// The denominator is floored so that matching near-zero entries compare
/// as equal rather than as 0/0.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
