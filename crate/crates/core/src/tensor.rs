// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is a value: parameters, activations snapshots and gradients
//! all live in one. Computation with gradients happens on a
//! [`Graph`](crate::graph::Graph), which copies tensors in as leaves and
//! hands gradients back through [`Tensor::accumulate_grad`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    ensure!(!shape.is_empty(), "tensor shape must have at least one dimension");
    ensure!(shape.iter().all(|&d| d > 0), "tensor shape {shape:?} has a zero dimension");
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        ensure!(
            data.len() == n,
            "data length {} does not match shape {shape:?} ({n} elements)",
            data.len()
        );
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(&[data.len()], data)
    }

    /// Gaussian entries `N(mean, stddev^2)`; `stddev == 0` gives a constant tensor.
    pub fn randn(shape: &[usize], mean: f32, stddev: f32, rng: &mut Rng) -> Result<Self> {
        ensure!(stddev >= 0.0 && stddev.is_finite(), "stddev must be finite and >= 0, got {stddev}");
        let n = check_shape(shape)?;
        let data = (0..n)
            .map(|_| {
                if stddev == 0.0 {
                    mean
                } else {
                    (mean as f64 + stddev as f64 * rng.normal()) as f32
                }
            })
            .collect();
        Self::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer (`+=` semantics).
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        ensure!(
            g.len() == self.data.len(),
            "gradient length {} does not match tensor shape {:?}",
            g.len(),
            self.shape
        );
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        ensure!(n == self.data.len(), "cannot reshape {:?} into {shape:?}", self.shape);
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn l1_norm(&self) -> f32 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn l2_norm(&self) -> f32 {
        libm::sqrtf(self.data.iter().map(|x| x * x).sum())
    }

    /// True when every entry (and gradient, if present) is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|x| x.is_finite()))
    }
}
