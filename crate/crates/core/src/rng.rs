//! Reproducible random streams.
//!
//! Replication `r` of a run with seed `s` draws from its own ChaCha8 stream,
//! keyed by a 64-bit finalizer of `(s, r)`, so results do not depend on the
//! order or the thread that runs a replication.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A (seed, stream) pair that identifies an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Child stream, e.g. one per replication.
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream { seed: self.key(), stream: index }
    }

    fn key(&self) -> u64 {
        mix64(self.seed ^ mix64(self.stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }
}
