//! Integer hashing shared by the renderer noise and k-means seeding.
//!
//! Everything here is pure 64-bit integer arithmetic, so results agree
//! bit-exactly across platforms.

use sha2::{Digest, Sha256};

/// SplitMix64 finalizer.
pub const fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a tuple into one hash: `h = splitmix64(h ^ part)` starting from zero.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0, |h, &p| splitmix64(h ^ p))
}

/// Top 53 bits of `h` as a value in `[0, 1)`.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
