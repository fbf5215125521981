//! Seed fan-out: every stage and sample derives its own stream from one root seed.

/// SplitMix64 finalizer over `(root, stream)`, truncated to 63 bits so seeds
/// survive TOML's signed integers.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

/// Named stage streams.
pub mod stage {
    pub const SPLIT: u64 = 1;
    pub const CLASSIFIER: u64 = 2;
    pub const EXTRACTOR: u64 = 3;
    pub const CONTRASTIVE: u64 = 4;
}
