//! Seeded random streams. Every stochastic routine draws from a ChaCha8
//! stream keyed by `(seed, stream id)`, so results are reproducible and
//! independent streams never overlap.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Stream ids used across the crate, kept distinct so that, for example,
/// the scorer's latent draws never alias the trainer's.
pub mod ids {
    pub const INIT: u64 = 1;
    pub const W_STATS: u64 = 2;
    pub const SCORER: u64 = 3 << 32;
    pub const PLAN: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const DISTILL: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const DATASET: u64 = 8 << 32;
    pub const DISC_INIT: u64 = 9;
    pub const DIRECTIONS: u64 = 10;
    pub const NOISE: u64 = 11;
}
