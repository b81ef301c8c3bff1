#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssformers::backbone::ImageTensor;
use ssformers::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Uniform values kept at least `gap` away from zero, so ReLU kinks and
/// max ties stay out of reach of a finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(gap..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_image(channels: usize, side: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    let data = (0..channels * side * side).map(|_| r.random::<f64>()).collect();
    ImageTensor::new(channels, side, side, data).unwrap()
}
