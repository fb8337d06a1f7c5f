//! Deterministic randomness helpers.
//!
//! Everything that samples randomness in this crate goes through a seeded
//! ChaCha12 stream so that identical seeds give byte-identical artifacts on
//! any platform and at any thread count.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (SplitMix64 finalizer over seed ^ index).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub trait RngExt {
    /// Uniform in [0, 1).
    fn uniform(&mut self) -> f64;
    fn range(&mut self, lo: f64, hi: f64) -> f64;
    /// Standard normal via Box-Muller.
    fn normal(&mut self) -> f64;
    /// Uniform index in [0, n).
    fn index(&mut self, n: usize) -> usize;
}

impl<R: RngCore> RngExt for R {
    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}
