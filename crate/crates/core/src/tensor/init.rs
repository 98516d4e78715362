use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// HE (Kaiming) normal initialization: zero mean, variance `2 / fan_in`,
/// deterministic in `seed`.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::arg("fan_in must be at least 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
    Tensor::new(shape, data)
}
