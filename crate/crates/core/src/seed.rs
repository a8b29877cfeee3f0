//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of integers rather
//! than by drawing from a shared generator, so results do not depend on the
//! order in which images, runs or tensors are produced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes an ordered list of keys into one 64-bit seed.
pub fn derive(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// FNV-1a, used to turn short labels into seed keys.
pub fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(keys))
}

/// Uniform draw in `[0, 1)` from a hash, for per-item priorities.
pub fn unit_from(keys: &[u64]) -> f64 {
    (derive(keys) >> 11) as f64 / (1u64 << 53) as f64
}

/// Hex encoding of a SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
