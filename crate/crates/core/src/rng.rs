//! Seeded randomness. One 64-bit seed reproduces every run; independent
//! substreams come from the ChaCha stream counter, so trial `i` draws the
//! same values no matter how trials are scheduled.

use crate::tensor::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Root generator for a seed.
pub fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of the given seed. Substreams never overlap
/// regardless of how much each one consumes.
pub fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Tensor with i.i.d. standard normal entries.
pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> DenseTensor {
    let numel: usize = shape.iter().product();
    DenseTensor::new(shape.to_vec(), normal_vec(numel, rng)).expect("shape/data consistent")
}

/// Uniform draw from the unit sphere in R^len (normalized Gaussian).
pub fn unit_sphere_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v = normal_vec(len, rng);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // astronomically unlikely, but never divide by ~0
        if norm > 1e-12 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}
