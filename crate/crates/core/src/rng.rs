//! Hierarchical seed derivation.
//!
//! Every consumer of randomness (data synthesis, initialization, batching)
//! gets its own stream derived from a root seed and a label, so adding a new
//! consumer never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree(root)
    }

    pub fn root(&self) -> u64 {
        self.0
    }

    /// Child node for `label`.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree(splitmix64(self.0 ^ fnv1a(label.as_bytes())))
    }

    /// Child node keyed by an integer (e.g. an epoch or class index).
    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0x5eed))))
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
