//! Dense `f64` tensors, a reverse-mode tape, and Adam.
//!
//! Tensors are row-major with an explicit shape. Differentiable computation
//! goes through a [`Tape`]: every operation appends a node holding its output
//! value and whatever it needs for the backward pass, and
//! [`Tape::backward`] walks the nodes in reverse execution order.

mod adam;
mod kernels;
mod tape;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use kernels::{conv2d_forward, pad_ring};
pub use tape::{Gradients, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Clones share storage; the first mutation of a shared tensor copies it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::try_from_vec(shape, data).expect("tensor data length must match shape")
    }

    pub fn try_from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_vec(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn scale(&mut self, a: f64) {
        self.data_mut().iter_mut().for_each(|x| *x *= a);
    }

    /// `self += other`, shapes must agree in element count.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign length");
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, a: f64) {
        assert_eq!(self.data.len(), other.data.len(), "add_scaled length");
        for (x, y) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *x += a * y;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest element, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
