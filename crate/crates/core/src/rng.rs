//! Seed derivation and portable random number generation.
//!
//! Every stochastic operation in this crate takes an explicit seed. Streams
//! for nested work (per epoch, per sample, per draw) are derived from a
//! master seed and an integer path, so results never depend on execution
//! order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path of stream ids.
/// Distinct paths give decorrelated seeds; the empty path is a plain mix.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p ^ 0xa076_1d64_78bd_642f));
    }
    s
}

/// ChaCha8 generator seeded from a derived seed.
pub fn seeded_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// `n` distinct indices from `0..population`, by partial Fisher-Yates.
pub(crate) fn sample_indices<R: Rng>(rng: &mut R, population: usize, n: usize) -> Vec<usize> {
    debug_assert!(n <= population);
    let mut indices: Vec<usize> = (0..population).collect();
    for i in 0..n {
        let j = rng.gen_range(i..population);
        indices.swap(i, j);
    }
    indices.truncate(n);
    indices
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // u1 in (0,1] so the log is finite
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
