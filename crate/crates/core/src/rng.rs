//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by a
//! `(seed, key...)` tuple, so a draw depends only on where it is used and
//! never on how many draws happened before it. That is what lets two
//! training strategies see the same `t`, noise, and batch on the same step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The stream for `seed` at address `key`.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let addr = key.iter().fold(0x5eed_u64, |acc, &k| splitmix(acc ^ splitmix(k)));
    rng.set_stream(addr);
    rng
}

/// A child seed for stage `stage` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stage: u64, salt: u64) -> u64 {
    use rand::RngCore;
    stream(seed, &[tag::RUN, stage, salt]).next_u64()
}

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

// Stream tags, kept distinct so unrelated consumers never share a stream.
pub(crate) mod tag {
    pub const SAMPLE_INIT: u64 = 1;
    pub const SAMPLE_STEP: u64 = 2;
    pub const TRAIN_STEP: u64 = 3;
    pub const PARAM_INIT: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const RUN: u64 = 9;
}
