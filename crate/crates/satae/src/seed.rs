//! Deterministic RNG plumbing.
//!
//! Every random choice in the crate flows from a single `u64` seed. Independent
//! consumers (weight init, per-epoch shuffling, data generation) get their own
//! ChaCha stream derived from that seed, so adding draws to one consumer never
//! perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable stream identifiers. The numeric values are part of the on-disk
/// reproducibility contract: changing them changes every seeded artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    /// Parameter initialization.
    Init = 1,
    /// Sample-order shuffling during training.
    Shuffle = 2,
    /// Synthetic data generation and patch sampling.
    DataGen = 3,
}

/// Build the RNG for one consumer of the given master seed.
pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
