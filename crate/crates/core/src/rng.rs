//! Deterministic random streams.
//!
//! Every stochastic decision in the crate draws from a [`StreamRng`]: a
//! xoshiro256** generator whose 256-bit state is expanded from a single
//! 64-bit key with SplitMix64. Keys for sub-streams are derived by folding a
//! path of integers (video index, epoch, batch index, ...) into the root seed,
//! so a stream's output never depends on how many other streams were consumed
//! before it or on which thread consumes it.
//!
//! The integer and float conversions below are fixed (no rejection loops) so
//! that other implementations can replay the exact same draws.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of stream coordinates into a root seed.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &x| splitmix64(acc ^ splitmix64(x)))
}

/// Stream namespaces, so that e.g. corpus video 3 and training epoch 3 never
/// share a stream.
pub mod domain {
    pub const CORPUS_VIDEO: u64 = 1;
    pub const CORPUS_SPLIT: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const TRAIN_BATCH: u64 = 4;
    pub const TRAIN_ORDER: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: Xoshiro256StarStar,
}

impl StreamRng {
    /// Root stream for a seed (state expanded by SplitMix64).
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream for `(seed, path...)`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        Self::new(derive_key(seed, path))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) by 128-bit multiply-shift. `n` must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle drawing from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference SplitMix64 generator seeded with 0.
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(GOLDEN_GAMMA);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(next(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let mut a = StreamRng::derive(7, &[1, 2]);
        let mut b = StreamRng::derive(7, &[1, 2]);
        let mut c = StreamRng::derive(7, &[2, 1]);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = StreamRng::new(1);
        for n in 1..50 {
            for _ in 0..100 {
                assert!(rng.below(n) < n);
            }
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = StreamRng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
