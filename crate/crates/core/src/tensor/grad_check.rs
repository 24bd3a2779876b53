//! Central finite differences, the independent oracle for every gradient
//! check in the crate.

use super::Tensor;

/// Default step for single-operation checks.
pub const OP_STEP: f64 = 1e-5;
/// Default step for whole-model checks.
pub const MODEL_STEP: f64 = 1e-4;

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every element `i` of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(floor)
}

/// Largest element-wise [`relative_error`] between two same-shape tensors.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}
