//! Seeded random streams.
//!
//! Every consumer (data, each parameter group, dropout, batch order) draws from
//! its own ChaCha stream of the same seed, so changing how much one consumer
//! draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

pub mod streams {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_TEST: u64 = 2;
    pub const BACKBONE_INIT: u64 = 10;
    pub const BRANCH_INIT: u64 = 11;
    pub const TEXT_INIT: u64 = 12;
    pub const HEAD_INIT: u64 = 13;
    pub const DROPOUT: u64 = 20;
    pub const SHUFFLE: u64 = 21;
    pub const TEST_FIXTURE: u64 = 99;
}

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tensor of i.i.d. `N(0, std^2)` samples.
pub fn gaussian(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}
