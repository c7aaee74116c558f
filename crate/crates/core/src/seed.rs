//! Stable seed derivation.
//!
//! All randomness in the crate flows through `ChaCha8Rng` (rand_chacha 0.9),
//! seeded from values derived here. The hash is FNV-1a followed by a
//! SplitMix64 finalizer, so derived seeds are identical across platforms and
//! toolchains.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn stable_hash(text: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `base ⊕ hash(tag)`, mixed so nearby bases do not produce correlated streams.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix64(base ^ stable_hash(tag))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_value() {
        // FNV-1a("a") = 0xaf63dc4c8601ec8c before the finalizer.
        assert_eq!(splitmix64(0xaf63_dc4c_8601_ec8c), stable_hash("a"));
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(7, "frame_0"), derive_seed(7, "frame_1"));
        assert_eq!(derive_seed(7, "frame_0"), derive_seed(7, "frame_0"));
    }
}
