//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! whose seed is a pure function of the user seed and a stream label, so
//! results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream labels keep independent consumers from sharing a sequence.
pub mod stream {
    pub const EPISODE: u64 = 0x4550_4953;
    pub const ADAPT: u64 = 0x4144_4150;
    pub const POLICY: u64 = 0x504f_4c49;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> LabRng {
    LabRng::seed_from_u64(derive_seed(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(0, stream::EPISODE, 0), derive_seed(0, stream::ADAPT, 0));
        assert_ne!(derive_seed(0, stream::EPISODE, 0), derive_seed(0, stream::EPISODE, 1));
        assert_eq!(derive_seed(7, stream::POLICY, 3), derive_seed(7, stream::POLICY, 3));
    }
}
