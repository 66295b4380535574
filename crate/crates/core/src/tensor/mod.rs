//! Dense row-major tensors and the deterministic math kernels built on them.
//!
//! Compute kernels are generic over [`Real`] (`f32` for training and
//! inference, `f64` for gradient checking). Storage element types (`u8`,
//! `i8`, binary16 bit patterns as `u16`) can be held in a [`Tensor`] but no
//! arithmetic is defined for them; they must be decoded first.

mod grad;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};

pub use grad::{
    batchnorm_grad, conv2d_grad, dense_grad, maxpool2d_grad, relu_grad,
    softmax_crossentropy_grad, BatchNormGrads, Conv2dGrads, DenseGrads,
};
pub use ops::{
    batchnorm_infer, batchnorm_train, conv2d, conv2d_output_dims, dense, flatten, maxpool2d,
    relu, softmax, BatchNormCache, BatchNormTrainOutput, ConvGeometry, MaxPoolOutput, Padding,
};

pub(crate) use grad::{
    batchnorm_backward_into, conv2d_backward_into, dense_backward_into, maxpool2d_backward_into,
};
pub(crate) use ops::{
    batchnorm_infer_inplace, conv2d_accumulate, conv2d_into, dense_accumulate, dense_into,
    maxpool2d_into, softmax_slice,
};

/// Floating-point element type usable by the compute kernels.
pub trait Real: Float + AddAssign + Default + Debug + Sum + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for ((&i, &d), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= d {
                return Err(Error::shape(format!("index {index:?} out of bounds for {:?}", self.shape)));
            }
            off += i * s;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<&T> {
        let off = self.offset(index)?;
        Ok(&self.data[off])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone + Default> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::default(); n])
    }
}

/// Round half away from zero. The single float-to-integer rounding rule used
/// across the crate (quantizers, downsampling, bias conversion).
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    // f32::round is specified as half-away-from-zero.
    x.round()
}

#[inline]
pub fn round_half_away_f64(x: f64) -> f64 {
    x.round()
}
