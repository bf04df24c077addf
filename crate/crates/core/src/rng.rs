//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha12 generator keyed by a 64-bit seed. Child streams
//! are derived with [`RngStream::split`], which hashes the parent seed together
//! with a caller-chosen key through SplitMix64. Two streams split from the same
//! parent with different keys are independent; the same `(seed, key)` always
//! yields the same child, regardless of how many threads are running or in
//! which order the children are created.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position of the generator in its keystream, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Restores a stream at a previously recorded keystream position.
    pub fn resume(seed: u64, word_pos: u128) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_word_pos(word_pos);
        s
    }

    /// Derives an independent child stream. Does not advance `self`.
    pub fn split(&self, key: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(key.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
