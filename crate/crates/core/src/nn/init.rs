use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::tensor::{Scalar, Tensor};

/// Seeded parameter initialiser. Values are drawn in `f64` and rounded, so
/// an `f32` and an `f64` model built from the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<F: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }

    /// Uniform in `±gain·sqrt(3/fan_in)`, i.e. variance `gain²/fan_in`.
    pub fn fan_in_uniform<F: Scalar>(
        &mut self,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
    ) -> Tensor<F> {
        self.uniform(shape, gain * (3.0 / fan_in as f64).sqrt())
    }

    pub fn normal<F: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }
}
