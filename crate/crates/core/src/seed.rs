//! Deterministic seed derivation.
//!
//! Every stage draws its randomness from the single run-level seed through a
//! named derivation, so any stage can be replayed in isolation.

/// Derives a child seed from `seed` and a stage tag.
///
/// Stable across platforms and releases: FNV-1a over the tag mixed through a
/// splitmix64 finalizer.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix(seed ^ h)
}

/// Derives a child seed from a tag plus an index (epochs, seeds-in-sweep, ads).
pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix(derive(seed, tag).wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive(42, "pairs"), derive(42, "pairs"));
        assert_ne!(derive(42, "pairs"), derive(42, "world"));
        assert_ne!(derive(42, "pairs"), derive(43, "pairs"));
        assert_ne!(derive_indexed(42, "epoch", 0), derive_indexed(42, "epoch", 1));
    }
}
