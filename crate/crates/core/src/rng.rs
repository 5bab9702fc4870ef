//! Seeded, indexed random streams for reproducible parallel sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one independent random sequence: a master seed plus a stream index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self { master_seed, stream_index }
    }

    /// ChaCha8 keyed by the master seed, positioned on its own stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }

    /// Derived family for a sub-experiment (e.g. one sweep point).
    pub fn child(&self, tag: u64) -> RngStream {
        let mixed = self.master_seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        RngStream { master_seed: mixed, stream_index: self.stream_index }
    }
}
