//! Weight initialization helpers.

use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Mix a global seed with stream/index coordinates into an independent
/// per-item seed (splitmix64 finalizer).
pub fn derive_seed(global: u64, stream: u64, index: u64) -> u64 {
    let mut z = global
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Tensor of i.i.d. normal(0, std) draws.
pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("randn: consistent by construction")
}

/// He fan-in initialization for a conv weight of shape `[oc, c, kh, kw]`.
pub fn he_conv(oc: usize, c: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> Tensor {
    let fan_in = (c * kh * kw) as f64;
    randn(&[oc, c, kh, kw], (2.0 / fan_in).sqrt(), rng)
}

/// He fan-in initialization for a linear weight of shape `[d, e]`.
pub fn he_linear(d: usize, e: usize, rng: &mut impl Rng) -> Tensor {
    randn(&[d, e], (2.0 / d as f64).sqrt(), rng)
}
