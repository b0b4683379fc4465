//! Named, splittable RNG substreams derived from one root seed.
//!
//! Every consumer asks for `(name, index)`; the stream seed is a hash of the
//! root seed and that key, so adding a new consumer never shifts the draws of
//! an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// 64-bit FNV-1a hash of a string.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, name: &str, index: u64) -> u64 {
        splitmix64(splitmix64(self.root ^ fnv1a(name)).wrapping_add(splitmix64(index)))
    }

    pub fn stream(&self, name: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.seed(name, index))
    }

    /// A child tree, for handing a whole namespace to a sub-component.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree::new(self.seed(name, u64::MAX))
    }
}
