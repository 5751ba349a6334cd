//! Central finite-difference gradients, the independent oracle used to
//! validate reverse-mode results. Deliberately knows nothing about the
//! graph: it only evaluates a scalar function at perturbed points.

use crate::tensor::Tensor;

/// Central-difference estimate (f(x+h*e) - f(x-h*e)) / (2h) per element.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between an analytic gradient and the
/// finite-difference oracle. The denominator is floored so near-zero
/// gradients compare absolutely.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
