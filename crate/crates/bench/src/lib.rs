//! Seeded inputs for the kernel benchmarks.

use getup_core::geometry::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn cloud(seed: u64, n: usize) -> Vec<Point3> {
    uniform(seed, 3 * n)
        .chunks(3)
        .map(|c| [10.0 * c[0], 2.0 * c[1], 40.0 + 40.0 * c[2]])
        .collect()
}

/// Mask with roughly `fraction` of `n` cells set.
pub fn sparse_mask(seed: u64, n: usize, fraction: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_bool(fraction)).collect()
}
