//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is keyed by a master seed plus a small
//! tuple of integers (stage tag, device index, clip index, ...). Streams are
//! therefore independent of evaluation order, which lets clip synthesis and
//! feature extraction run in parallel without changing a single output byte.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_DEVICE: u64 = 0x6465_7669;
pub(crate) const TAG_SOURCE: u64 = 0x736f_7572;
pub(crate) const TAG_NOISE: u64 = 0x6e6f_6973;
pub(crate) const TAG_GAIN: u64 = 0x6761_696e;
pub(crate) const TAG_SUBSET: u64 = 0x7375_6273;
pub(crate) const TAG_INIT: u64 = 0x696e_6974;
pub(crate) const TAG_SHUFFLE: u64 = 0x7368_7566;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `master`, producing a well-scattered child seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}
