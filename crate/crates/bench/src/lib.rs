//! Shared inputs for the benchmarks.

use csnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Values in `[0, 1)`, as an image or probability map.
pub fn unit(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, seed).map(|v| 0.5 * (v + 1.0))
}
