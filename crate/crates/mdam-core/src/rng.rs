//! Seed plumbing. All randomness flows from one run seed through a
//! counter-based generator; independent components (simulation, chains)
//! take distinct streams so the number of chains never perturbs another
//! chain's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids; keep these stable so runs reproduce bit-for-bit.
pub const STREAM_SIMULATE: u64 = 1;
pub const STREAM_CHAIN_BASE: u64 = 1000;

/// Counter-based RNG for a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for chain `chain_ix` of a run.
pub fn chain_rng(seed: u64, chain_ix: usize) -> ChaCha8Rng {
    stream_rng(seed, STREAM_CHAIN_BASE + chain_ix as u64)
}
