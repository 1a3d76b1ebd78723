//! Seeded randomness.
//!
//! Every random draw in the toolkit comes from a ChaCha8 stream. Independent
//! sub-streams are keyed by mixing the invocation seed with a stream index
//! through the SplitMix64 finalizer, so results agree across platforms and
//! across sequential and parallel execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 output for `seed + (stream + 1) * golden_gamma`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: u64) -> Rng {
    seeded(derive_seed(seed, stream))
}
