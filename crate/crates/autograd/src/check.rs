//! Finite-difference verification helpers shared by test suites.

use ndarray::ArrayD;

/// Central finite-difference gradient of `f` with respect to `inputs[which]`.
pub fn finite_diff_gradient<F>(f: F, inputs: &[ArrayD<f64>], which: usize, eps: f64) -> ArrayD<f64>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let base = &inputs[which];
    let mut grad = ArrayD::zeros(base.shape());
    for idx in 0..base.len() {
        let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
        let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
        plus[which].as_slice_mut().unwrap()[idx] += eps;
        minus[which].as_slice_mut().unwrap()[idx] -= eps;
        let d = (f(&plus) - f(&minus)) / (2.0 * eps);
        grad.as_slice_mut().unwrap()[idx] = d;
    }
    grad
}

/// Global relative error ||a - b||_2 / max(||a||_2, ||b||_2, 1e-12).
pub fn global_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
