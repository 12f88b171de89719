//! Central-difference gradient estimates for checking reverse-mode rules.

use super::{Result, Tensor, TensorError};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(TensorError::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.detach();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error needs equal lengths");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
