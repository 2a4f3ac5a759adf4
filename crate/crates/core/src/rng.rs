//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! addressed by `(seed, stream)`, so independent consumers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// splitmix64 finalizer; mixes a tag into a seed.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-Gaussian tensor drawn from `(seed, stream)`.
pub fn gaussian<T: Scalar>(shape: &[usize], seed: u64, stream_id: u64) -> Tensor<T> {
    let mut rng = stream(seed, stream_id);
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(v)
    })
}
