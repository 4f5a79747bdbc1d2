use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Scalar;

/// He-normal initialisation: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::of(dist.sample(rng))).collect()
}

/// Uniform on `[-bound, bound]`.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Vec<T> {
    (0..len).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
}
