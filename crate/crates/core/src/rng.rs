//! Reproducible random streams.
//!
//! Each sample path owns a ChaCha8 generator keyed by `(master seed, path
//! index)`; independent sources of randomness within a path use separate
//! ChaCha streams. Paths therefore never share state and can be produced in
//! any order.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

/// Stream for the hidden jump chain.
pub const STREAM_CHAIN: u64 = 0;
/// Stream for observation noise.
pub const STREAM_OBS: u64 = 1;
/// Stream for process noise of linear-Gaussian models.
pub const STREAM_PROCESS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathSeed {
    pub master: u64,
    pub index: u64,
}

impl PathSeed {
    pub fn new(master: u64, index: u64) -> Self {
        PathSeed { master, index }
    }

    pub fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master.to_le_bytes());
        key[8..16].copy_from_slice(&self.index.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng
    }
}

#[inline]
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
