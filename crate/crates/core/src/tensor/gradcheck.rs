use super::Tensor;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function at `theta`.
///
/// Coordinate `i` is `(f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<T: Scalar>(
    theta: &Tensor<T>,
    eps: f64,
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(contract(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let base = theta.data()[i];
        probe.data_mut()[i] = base + T::lit(eps);
        let up = f(&probe)?;
        probe.data_mut()[i] = base - T::lit(eps);
        let down = f(&probe)?;
        probe.data_mut()[i] = base;
        out.push((up - down) / T::lit(2.0 * eps));
    }
    Tensor::new(theta.shape().to_vec(), out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64(), floor))
        .fold(0.0, f64::max)
}
