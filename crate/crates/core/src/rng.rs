//! Seeded random streams.
//!
//! All randomness in a run descends from one master seed. A stream is named by
//! a short list of tags (purpose, epoch, batch, ...), hashed with SplitMix64
//! into a ChaCha8 seed, so streams never overlap and do not depend on how many
//! numbers another stream consumed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type ChainRng = ChaCha8Rng;

/// Stream tags used by the training and evaluation loops.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_BATCH: u64 = 3;
    pub const VALIDATE: u64 = 4;
    pub const EVALUATE: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const NORM_STATS: u64 = 7;
    pub const DEQUANTIZE: u64 = 8;
    pub const PARZEN: u64 = 9;
    pub const ISOTROPIC: u64 = 10;
    pub const VISUALIZE: u64 = 11;
    pub const INPAINT: u64 = 12;
    pub const DATA: u64 = 13;
    pub const SPLIT: u64 = 14;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> ChainRng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw in `[0, 1)`.
#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
