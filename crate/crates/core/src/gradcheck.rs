//! Central finite-difference gradient verification.
//!
//! Used throughout the test suites to validate analytic gradients of single
//! primitives and of the fully assembled network.

use crate::tensor::Tensor;

/// Numerically differentiates `f` at `inputs` by central differences,
/// returning one gradient tensor per input.
pub fn central_diff(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> f64, eps: f64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = f(&work);
            work[i].data_mut()[j] = orig - eps;
            let fm = f(&work);
            work[i].data_mut()[j] = orig;
            grad[j] = (fp - fm) / (2.0 * eps);
        }
        out.push(Tensor::from_vec(inputs[i].shape(), grad));
    }
    out
}

/// Largest elementwise relative error between two gradient buffers,
/// measured against `max(|analytic|, |numeric|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
