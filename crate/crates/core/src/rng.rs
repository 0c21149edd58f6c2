//! All randomness in the crate comes from ChaCha8 streams keyed by a
//! single 64-bit seed. Sub-seeds for steps, batches and initializers are
//! derived with the SplitMix64 finalizer, so results do not depend on the
//! platform or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ index)
}

/// Tensor with i.i.d. `N(0, scale²)` entries.
pub fn gaussian(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("gaussian samples are finite")
}
