//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Normal samples with standard deviation `std`, resampled until they fall
/// inside `±2·std`.
pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * std as f64) as f32;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub fn uniform(shape: impl Into<Vec<usize>>, bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Independent generator for one named parameter group.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
