//! Counter-based keyed random streams.
//!
//! A stream is identified by a tuple of 64-bit words (seed, trial, layer,
//! op kind, site, replica, ...). Words are absorbed with the SplitMix64
//! finalizer; the stream then yields `mix(key + counter * GOLDEN)`. Nothing
//! depends on call order outside a single stream, so any schedule of sites
//! reproduces the same bits.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Absorbs one more word into a key.
#[inline(always)]
pub fn absorb(key: u64, word: u64) -> u64 {
    mix64(key.wrapping_add(GOLDEN) ^ mix64(word.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn derive_key(words: &[u64]) -> u64 {
    words.iter().fold(0x243f_6a88_85a3_08d3, |k, &w| absorb(k, w))
}

/// Maps 64 random bits to a uniform double in [0, 1).
#[inline(always)]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(words: &[u64]) -> Self {
        Self::from_key(derive_key(words))
    }

    #[inline(always)]
    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    #[inline(always)]
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform in (0, 1], safe for `ln`.
    #[inline]
    pub fn next_open_f64(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}
