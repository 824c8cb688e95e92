//! Root-seed plumbing. Every stochastic stage derives its own named stream
//! from the run's root seed, so stages can be reordered or skipped without
//! perturbing each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable 64-bit hash of a label (FNV-1a followed by a splitmix finalizer).
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    // splitmix64 finalizer decorrelates nearby labels
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic substream for `(root_seed, label)`.
pub fn substream(root_seed: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(root_seed ^ label_hash(label))
}

/// Substream further split by an integer index (per person, per epoch, ...).
pub fn substream_indexed(root_seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut z = (root_seed ^ label_hash(label)).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}
