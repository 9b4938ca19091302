//! Seedable, splittable random streams.
//!
//! Every stream is ChaCha20 (20 rounds, 64-bit block counter, 64-bit stream
//! id). The 256-bit key is four consecutive SplitMix64 outputs starting from
//! the 64-bit seed, written little-endian. A substream keeps the key and sets
//! the stream id to `splitmix64` folded over its tags, so any implementation
//! with ChaCha20 and SplitMix64 reproduces the same numbers:
//!
//! * `uniform()` is `(next_u64 >> 11) · 2⁻⁵³`.
//! * `normal()` is Box–Muller on two uniforms `u1, u2`, returning
//!   `sqrt(−2 ln(1 − u1)) · cos(2π u2)`; no value is cached.
//! * `below(n)` rejects draws `≥ 2⁶⁴ − (2⁶⁴ mod n)` and returns `draw mod n`.
//! * `shuffle` is Fisher–Yates from the last index down, using `below(i + 1)`.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// One SplitMix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags for the independent consumers of one seed.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const DOMAIN: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const GRADCHECK: u64 = 5;
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, &[])
    }

    /// Independent stream identified by `(seed, tags)`.
    pub fn substream(seed: u64, tags: &[u64]) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha20Rng::from_seed(key);
        let mut id = 0u64;
        for &t in tags {
            let mut s = id ^ t;
            id = splitmix64(&mut s);
        }
        inner.set_stream(id);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
