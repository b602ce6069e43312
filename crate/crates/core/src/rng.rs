//! Seeded random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Derives an independent seed for a named sub-stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn stream(base: u64, tag: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, tag))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
