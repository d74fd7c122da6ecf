//! Deterministic random streams.
//!
//! All randomness comes from xoshiro256** seeded through SplitMix64
//! (`Xoshiro256StarStar::seed_from_u64`). Independent streams derived from one
//! seed are separated with the generator's 2^128-step `jump`, so stream `k` of
//! seed `s` is "seed with `s`, then jump `k` times". Floats use the top 53 bits
//! of `next_u64`; normals use the Box-Muller cosine branch, one normal per two
//! uniforms. These rules are fixed so fixtures reproduce in any language.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    /// Stream `stream` of `seed`.
    pub fn stream(seed: u64, stream: u32) -> Self {
        let mut inner = Xoshiro256StarStar::seed_from_u64(seed);
        for _ in 0..stream {
            inner.jump();
        }
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi)` by multiply-shift.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        let span = (hi - lo) as u128;
        lo + ((self.next_u64() as u128 * span) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(0, i + 1);
            items.swap(i, j);
        }
    }
}
