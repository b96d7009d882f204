//! Seed fan-out.
//!
//! A run has one global seed. Every consumer derives its own stream with
//! [`sub_seed`]: the first eight bytes (little-endian) of
//! `SHA-256(seed as u64 LE || name as UTF-8)`. Per-item streams inside a
//! component use `sub_seed ^ index`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const PHANTOM: &str = "phantom";
pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const AUGMENT: &str = "augment";
pub const FOREST: &str = "forest";
pub const COHORT: &str = "cohort";
pub const TRIALS: &str = "trials";

pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    rng(sub_seed(seed, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_give_distinct_streams() {
        assert_ne!(sub_seed(7, SPLIT), sub_seed(7, INIT));
        assert_ne!(sub_seed(7, SPLIT), sub_seed(8, SPLIT));
        assert_eq!(sub_seed(7, FOREST), sub_seed(7, FOREST));
    }
}
