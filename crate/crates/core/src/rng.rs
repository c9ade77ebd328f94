use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// All randomness in the crate flows through ChaCha8 seeded from a u64, so
/// every pipeline is reproducible bit-for-bit across platforms.
pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for a sub-task (data split, init, shuffling) that
/// must not perturb the draws of its siblings.
pub fn derive(seed: u64, stream: u64) -> Prng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Standard normal via Box-Muller; two uniforms per value, one value kept.
pub fn normal(rng: &mut Prng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_tensor(shape: &[usize], scale: f64, rng: &mut Prng) -> Tensor {
    let numel = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| scale * normal(rng)).collect(),
    }
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Prng) -> Tensor {
    let numel = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| uniform(rng, lo, hi)).collect(),
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut Prng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
