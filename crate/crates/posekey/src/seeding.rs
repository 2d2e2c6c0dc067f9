//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate is a `ChaCha20Rng` seeded
//! through [`derive_seed`], which mixes a base seed with a list of context
//! parts (sample index, epoch, component tag, ...) through splitmix64.
//! Same base and parts give the same stream on every platform; any change
//! to either gives an unrelated stream.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `base` one splitmix64 round at a time.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &p in parts {
        acc = splitmix64(acc ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    acc
}

/// ChaCha20 stream for the given seed context.
pub fn rng_from(base: u64, parts: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stable tags for the major seed consumers, so their streams never collide.
pub mod tag {
    pub const DATASET: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const TRAIN: u64 = 0x03;
    pub const SAMPLE: u64 = 0x04;
    pub const EVAL: u64 = 0x05;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn derivation_is_stable() {
        // frozen values: regressions here would silently change every run
        assert_eq!(derive_seed(0, &[]), 16294208416658607535);
        assert_eq!(derive_seed(42, &[tag::DATASET]), 12793939602564865923);
        assert_eq!(derive_seed(42, &[tag::DATASET, 7]), 3029626686439156535);
    }

    #[test]
    fn distinct_contexts_give_distinct_seeds() {
        let mut seen = HashSet::new();
        for base in 0..8u64 {
            for a in 0..8u64 {
                for b in 0..8u64 {
                    seen.insert(derive_seed(base, &[a, b]));
                }
            }
        }
        assert_eq!(seen.len(), 512);
    }

    #[test]
    fn parts_order_matters() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[1]));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = rng_from(5, &[tag::TRAIN, 3]);
        let mut b = rng_from(5, &[tag::TRAIN, 3]);
        let va: Vec<u32> = (0..4).map(|_| a.random()).collect();
        let vb: Vec<u32> = (0..4).map(|_| b.random()).collect();
        assert_eq!(va, vb);
    }
}
