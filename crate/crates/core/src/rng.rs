//! Seeded random-number streams.
//!
//! Every source of randomness in a run is a ChaCha8 generator derived from
//! the run seed by one fixed rule: `stream_rng(seed, stream)` seeds the
//! generator with the run seed and selects an independent ChaCha stream per
//! purpose. Consuming draws from one stream never shifts another, which is
//! what makes traces reproducible and lets degenerate configurations match
//! their plain-network twins bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

/// Stream used for parameter initialization.
pub const STREAM_INIT: u64 = 0;
/// Stream used for mask sampling during training.
pub const STREAM_MASKS: u64 = 1;
/// Stream used for per-epoch batch shuffling.
pub const STREAM_SHUFFLE: u64 = 2;
/// Stream used for the train/validation split.
pub const STREAM_SPLIT: u64 = 3;

/// Derives the generator for one named stream of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tensor with elements drawn uniformly from `[-limit, limit]`.
///
/// Draws happen in `f64` and are then narrowed, so a given seed produces the
/// same underlying sequence regardless of the scalar type in use.
pub fn uniform_tensor<T: Scalar>(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| fl::<T>(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data length agree by construction")
}
