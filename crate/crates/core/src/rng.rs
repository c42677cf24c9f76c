//! Stateless, counter-based random numbers.
//!
//! Every random quantity in the crate is a pure function of a key derived
//! from `(master_seed, domain tag, identifiers...)` and a counter. Results
//! therefore do not depend on evaluation order or thread count.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Domain tags separating independent uses of the same master seed.
pub mod tag {
    pub const ENVIRONMENT: u64 = 0x656e_7669_726f_6e00;
    pub const WALK: u64 = 0x7761_6c6b_0000_0000;
    pub const RADIUS: u64 = 0x7869_0000_0000_0000;
    pub const BOOTSTRAP: u64 = 0x626f_6f74_0000_0000;
    pub const ENSEMBLE: u64 = 0x656e_7365_6d62_6c65;
    pub const AUDIT: u64 = 0x6175_6469_7400_0000;
    pub const INCREMENT: u64 = 0x696e_6372_0000_0000;
}

/// SplitMix64 output function.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into a 64-bit key.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3_u64;
    for &w in words {
        h = mix64(h.wrapping_add(GOLDEN) ^ w);
    }
    h
}

/// Maps 64 random bits to a uniform double in `[0, 1)`.
#[inline(always)]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// A random stream `i -> mix64(key + (i + 1) * GOLDEN)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Stream keyed by a hash of the given words.
    pub fn from_words(words: &[u64]) -> Self {
        Self::new(hash_words(words))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Random access to the `index`-th output without advancing the stream.
    #[inline(always)]
    pub fn at(&self, index: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    #[inline(always)]
    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform integer in `0..n`.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}
