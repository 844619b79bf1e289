use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Scalar, Tensor};

/// Normal(0, std²) resampled until it falls inside ±2·std.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// He-normal initialization for a ReLU-followed conv with the given fan-in.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}
