//! Seed derivation. Every random stream in a run is a ChaCha8 generator
//! keyed by the run seed plus a path of stream tags, so adding a new stream
//! never perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn derive_rng(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags. Kept in one place so collisions are visible.
pub mod tag {
    pub const TASKS: u64 = 1;
    pub const POOL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const CORESET: u64 = 5;
    pub const DETECTOR: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const ORACLE: u64 = 8;
    pub const FINETUNE: u64 = 9;
    pub const CENTERS: u64 = 10;
    pub const SAMPLES: u64 = 11;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = derive_rng(7, &[1, 2]).random();
        let b: u64 = derive_rng(7, &[1, 2]).random();
        let c: u64 = derive_rng(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
