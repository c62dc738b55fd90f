//! Seed derivation. Every random stream in a run is a ChaCha generator whose
//! seed is derived from the root seed and a label, so sub-seeds can be logged
//! and any stage reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child seed for a named sub-stream.
    pub fn derive(&self, label: &str) -> SeedTree {
        let mut h = splitmix64(self.seed);
        for b in label.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        SeedTree { seed: h }
    }

    /// Child seed for the `index`-th element of a sequence.
    pub fn index(&self, index: u64) -> SeedTree {
        SeedTree {
            seed: splitmix64(splitmix64(self.seed) ^ index.wrapping_mul(0xd134_2543_de82_ef95)),
        }
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
