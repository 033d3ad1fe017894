//! Seeding conventions.
//!
//! Every stochastic component draws from ChaCha8, a counter-based stream
//! cipher generator, seeded through [`rng_from_seed`]. Independent
//! sub-streams (one per context during augmentation, for example) get their
//! seed from [`derive_seed`], so results do not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Name recorded in artifacts that consumed randomness.
pub const RNG_ALGORITHM: &str = "ChaCha8";

pub type G2rRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> G2rRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hex SHA-256 of a byte string; used for artifact fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
