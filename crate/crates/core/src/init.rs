//! Parameter initialization.

use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Standard deviation of MSRA (He) normal init for a (c_out, c_in, kh, kw) kernel.
pub fn msra_std(shape: Shape) -> f64 {
    (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
}

/// Zero-mean Gaussian kernel with std √(2 / (c_in·kh·kw)), fully determined by `seed`.
pub fn msra_init(shape: Shape, seed: u64) -> Tensor {
    msra_init_with(shape, &mut Rng::new(seed))
}

pub fn msra_init_with(shape: Shape, rng: &mut Rng) -> Tensor {
    let std = msra_std(shape);
    Tensor::from_fn(shape, |_| rng.normal(0.0, std))
}

/// Uniform(−1/√fan_in, 1/√fan_in), the usual fully connected default.
pub fn fan_in_uniform_with(shape: Shape, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}
