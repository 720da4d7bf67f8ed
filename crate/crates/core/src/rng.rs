//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a stable hash of its coordinates, so results do not depend on
//! scheduling or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine stream coordinates into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_0f_a9e7u64, |acc, p| mix(acc ^ mix(*p)))
}

pub fn str_key(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(&[1, 2, 3]).gen();
        let b: u64 = stream(&[1, 2, 3]).gen();
        let c: u64 = stream(&[1, 3, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(fnv1a(b""), FNV_OFFSET);
    }
}
