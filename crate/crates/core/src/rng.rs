//! Splittable, counter-based randomness.
//!
//! A [`RngKey`] names a position in a tree of ChaCha streams. Splitting by
//! `(step, layer, ...)` yields the same stream regardless of how much
//! randomness sibling keys consumed, so dropout masks and initializations are
//! reproducible from the run seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    seed: u64,
    path: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey { seed, path: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, tag: u64) -> Self {
        RngKey { seed: self.seed, path: splitmix(self.path ^ splitmix(tag.wrapping_add(1))) }
    }

    pub fn named(&self, name: &str) -> Self {
        // FNV-1a
        let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        self.split(h)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.path);
        r
    }
}
