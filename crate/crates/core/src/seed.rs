//! Deterministic seed derivation. Every random draw in the toolkit comes from
//! a ChaCha stream keyed by a seed derived here, so outputs depend only on
//! the master seed and the position of a draw, never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(master ^ mix64(stream)).wrapping_add(index))
}

/// Stable 64-bit hash of a label, for keying streams by name.
pub fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(h)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = derive_seed(7, 1, 0);
        assert_eq!(a, derive_seed(7, 1, 0));
        assert_ne!(a, derive_seed(7, 1, 1));
        assert_ne!(a, derive_seed(7, 2, 0));
        assert_ne!(a, derive_seed(8, 1, 0));
        assert_ne!(label_hash("peacock"), label_hash("dog"));
    }
}
