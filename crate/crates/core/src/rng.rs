//! Seeded, counter-based random streams.
//!
//! A stream is a ChaCha20 keystream keyed by the master seed and addressed by
//! a 64-bit stream id, so every `(stage, epoch, batch)` tuple gets its own
//! reproducible sequence regardless of what other streams consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

pub fn derive_stream(master_seed: u64, stream_id: u64) -> RngStream {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    let mut inner = ChaCha20Rng::from_seed(key);
    inner.set_stream(stream_id);
    RngStream {
        master_seed,
        stream_id,
        inner,
    }
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives a sibling stream under the same master seed.
    pub fn sibling(&self, stream_id: u64) -> RngStream {
        derive_stream(self.master_seed, stream_id)
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

/// Stable stream id for a named stage and a tuple of indices (FNV-1a 64).
pub fn stream_key(stage: &str, indices: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    };
    for b in stage.bytes() {
        feed(b);
    }
    feed(0xff);
    for i in indices {
        for b in i.to_le_bytes() {
            feed(b);
        }
    }
    h
}
