//! Counter-based random streams.
//!
//! A stream is a ChaCha20 keystream selected by `(seed, stream_id)`; the
//! block counter advances as words are consumed. Two streams with the same
//! pair yield the same sequence no matter how their draws are interleaved
//! with other streams, so parallel sampling is bit-identical to sequential.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

/// Opens the stream `(seed, stream_id)` at counter zero.
pub fn rng_stream(seed: u64, stream_id: u64) -> RngStream {
    let mut inner = ChaCha20Rng::seed_from_u64(seed);
    inner.set_stream(stream_id);
    RngStream { seed, stream_id, inner }
}

/// Stable 64-bit key for a named stream: FNV-1a over the label bytes and
/// the little-endian bytes of each index.
pub fn stream_key(label: &str, indices: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    };
    label.bytes().for_each(&mut eat);
    for i in indices {
        eat(0xff);
        i.to_le_bytes().into_iter().for_each(&mut eat);
    }
    h
}

impl RngStream {
    /// Stream derived from a label and index path under `seed`.
    pub fn named(seed: u64, label: &str, indices: &[u64]) -> Self {
        rng_stream(seed, stream_key(label, indices))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` by rejection, so there is no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
