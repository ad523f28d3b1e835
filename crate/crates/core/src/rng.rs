//! Seeded randomness. All stochastic behaviour in the crate flows through a
//! ChaCha stream so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type DetRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named component from a root seed.
pub fn derive(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_f64(rng: &mut DetRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform_f64(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
