//! Central finite differences, the independent oracle for every gradient
//! test in the crate.

use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for a single coordinate `i`.
pub fn central_difference(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    i: usize,
    h: f64,
) -> f64 {
    let mut probe = x.clone();
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let up = f(&probe);
    probe.data_mut()[i] = orig - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_gradient(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    Tensor::from_fn(x.shape().to_vec(), |i| central_difference(&f, x, i, h))
}

/// Relative discrepancy between an analytic and a numeric derivative,
/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps near-zero entries from
/// turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}
