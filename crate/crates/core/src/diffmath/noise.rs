use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

/// Seeded source of unit Gaussian draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::lit(self.rng.sample::<f64, _>(StandardNormal))).collect();
        Tensor::new(values, shape).expect("rank checked by caller")
    }

    /// A source that always yields zeros, for deterministic (mode) rollouts.
    pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
