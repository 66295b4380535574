//! Seeded pseudo-random streams.
//!
//! Every stream is xoshiro256** whose 256-bit state is filled from a u64
//! seed by SplitMix64 (increment 0x9E3779B97F4A7C15, finalizer multipliers
//! 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Derived quantities are
//! defined on top of `next_u64` so another implementation can reproduce
//! them bit for bit:
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`, in [0, 1).
//! * `below(n)` = high 64 bits of the 128-bit product `next_u64() * n`.
//! * `derive_seed(seed, stream)` = SplitMix64 finalizer applied to
//!   `seed ^ (stream * 0x9E3779B97F4A7C15)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix_finalize(seed ^ stream.wrapping_mul(GOLDEN_GAMMA))
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`; `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
