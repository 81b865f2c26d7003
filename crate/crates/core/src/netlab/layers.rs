use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};

/// Fully-connected layer, `y = x Wᵀ + b` with `W` shaped `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(d_out: usize, d_in: usize, std: f64, bias: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Linear {
            weight: Matrix::from_fn(d_out, d_in, |_, _| T::of(normal.sample(rng))),
            bias: vec![T::of(bias); d_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Convolution weight `c_out x c_in x k x k` plus per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn init<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..c_out * c_in * k * k).map(|_| T::of(normal.sample(rng))).collect();
        ConvLayer {
            weight: Tensor::new(vec![c_out, c_in, k, k], data).expect("conv dims"),
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub(crate) fn push_le<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    for v in data {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}
