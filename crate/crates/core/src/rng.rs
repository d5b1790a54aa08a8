//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a seed derived from a master seed plus a tuple of integer tags, so
//! results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

/// Tags that separate independent random streams derived from one seed.
pub mod tag {
    pub const STREAM: u64 = 0x5354_5245;
    pub const SHAPE: u64 = 0x5348_4150;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const DELTA: u64 = 0x4445_4c54;
    pub const MASK: u64 = 0x4d41_534b;
    pub const BATCH: u64 = 0x4241_5443;
    pub const INIT: u64 = 0x494e_4954;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const EVAL: u64 = 0x4556_414c;
    pub const SWEEP: u64 = 0x5357_4550;
    pub const LEMMA: u64 = 0x4c45_4d4d;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`. Distinct tag tuples give unrelated seeds.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019))))
}

pub fn rng_from(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}

pub fn standard_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn unit_vector(rng: &mut SimRng, dim: usize) -> alloc::vec::Vec<f64> {
    loop {
        let v: alloc::vec::Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = crate::linalg::norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
