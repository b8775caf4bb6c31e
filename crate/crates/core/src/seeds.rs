//! Deterministic seed derivation. Stable across platforms and releases, so
//! reports are reproducible byte for byte.

/// FNV-1a over arbitrary bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// SplitMix64-style combination of two seed words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stream seed for a named component of a run (e.g. a method or a stage).
pub fn stream(seed: u64, label: &str, index: u64) -> u64 {
    mix(mix(seed, fnv1a(label.as_bytes())), index)
}
