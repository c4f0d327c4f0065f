//! Seeded randomness. Every stochastic draw in the pipeline comes from a
//! ChaCha8 stream keyed by a root seed and a stream label, so runs replay
//! bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for draw `index` of stream `stream` under `root`.
pub fn derive(root: u64, stream: u64, index: u64) -> u64 {
    mix(mix(root ^ mix(stream)).wrapping_add(index))
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Stream labels for [`derive`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const INVERSION: u64 = 3;
    pub const CENTROID: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const INPAINT: u64 = 6;
    pub const TRAJECTORY: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const BASELINE: u64 = 9;
}
