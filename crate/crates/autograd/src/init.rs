//! Weight initialization helpers.

use crate::element::Element;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Kaiming-uniform initialization for a leaky-ReLU nonlinearity.
///
/// Values are drawn in f64 and cast, so f32 and f64 models built from the
/// same seed see the same initial weights up to rounding.
pub fn kaiming_uniform<T: Element>(
    shape: &[usize],
    fan_in: usize,
    leaky_slope: f64,
    rng: &mut ChaCha8Rng,
) -> ArrayD<T> {
    let gain = (2.0 / (1.0 + leaky_slope * leaky_slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), vals).unwrap()
}

/// Zero-filled array (bias initialization).
pub fn zeros<T: Element>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(shape.to_vec())
}
