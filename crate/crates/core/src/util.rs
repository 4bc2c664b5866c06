//! Seed derivation and small hashing helpers shared across modules.

/// SplitMix64 step; the standard 64-bit finalizer-based generator.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed and a tag.
///
/// Used everywhere a component needs its own RNG stream (parameter init,
/// per-epoch shuffles, per-sample augmentation) so that consuming draws in
/// one stream never shifts another.
pub fn subseed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

/// Stream tags for [`subseed`].
pub mod tags {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const SYNTH: u64 = 0x04;
    pub const PROBE: u64 = 0x05;
}

/// FNV-1a over raw bytes; cheap content checksum for determinism tests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
