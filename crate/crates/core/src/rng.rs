//! Seed derivation. All randomness in the pipeline descends from one user seed
//! mixed with stable hashes of image ids and stage labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Seed for per-image randomness: `seed XOR FNV-1a(image_id)`.
pub fn image_seed(seed: u64, image_id: &str) -> u64 {
    seed ^ fnv1a(image_id.as_bytes())
}

/// Derive an independent seed for a named pipeline stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stage.as_bytes()))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(42, "pq"), stage_seed(42, "codebook"));
        assert_eq!(stage_seed(42, "pq"), stage_seed(42, "pq"));
    }
}
