//! Central finite-difference gradient verification.

/// Central-difference gradient of a scalar function, coordinate by
/// coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for j in 0..theta.len() {
        probe[j] = theta[j] + eps;
        let hi = f(&probe);
        probe[j] = theta[j] - eps;
        let lo = f(&probe);
        probe[j] = theta[j];
        grad[j] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Compares an analytic gradient against central differences of `f` at
/// `theta` and returns the maximum relative error, with a small floor on
/// the denominator so near-zero coordinates do not blow up the ratio.
pub fn grad_check(
    f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let fd = finite_difference(f, theta, eps);
    fd.iter()
        .zip(analytic)
        .map(|(&d, &a)| relative_error(d, a))
        .fold(0.0, f64::max)
}

/// [`grad_check`] probing an evenly spread sample of coordinates, for
/// parameter vectors too large to difference exhaustively. With
/// `sample >= theta.len()` this equals the exhaustive check.
pub fn grad_check_sampled(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    sample: usize,
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    if sample >= theta.len() {
        return grad_check(f, theta, analytic, eps);
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..sample {
        let j = i * theta.len() / sample;
        probe[j] = theta[j] + eps;
        let hi = f(&probe);
        probe[j] = theta[j] - eps;
        let lo = f(&probe);
        probe[j] = theta[j];
        let d = (hi - lo) / (2.0 * eps);
        worst = worst.max(relative_error(d, analytic[j]));
    }
    worst
}

fn relative_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6)
}
