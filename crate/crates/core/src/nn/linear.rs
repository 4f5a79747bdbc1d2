use rand::Rng;

use super::init;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Linear {
            weight: Tensor::param(init::uniform(inputs * outputs, bound, rng), [inputs, outputs])?,
            bias: Tensor::param(vec![T::zero(); outputs], [outputs])?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
