//! Seeded weight initialisers.

use rand::Rng;

use super::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// LSTM bias `[4h]`: zeros except the forget-gate block, which is 1.
pub fn lstm_bias(hidden: usize) -> Tensor {
    let mut data = vec![0.0; 4 * hidden];
    data[hidden..2 * hidden].fill(1.0);
    Tensor::new(vec![4 * hidden], data).expect("shape matches data")
}
