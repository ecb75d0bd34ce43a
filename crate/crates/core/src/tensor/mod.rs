//! Dense row-major `f64` tensors and the reverse-mode graph built on them.
//!
//! [`Tensor`] is an immutable value: the payload sits behind an `Arc` so that
//! parameter tensors can be loaded into many graphs (one per sample, possibly
//! on different threads) without copying. Gradient buffers do not live on the
//! tensor itself; they are produced by [`Graph::backward`] keyed by parameter
//! and accumulated into the [`ParameterStore`](crate::params::ParameterStore).

mod gradcheck;
mod graph;
pub(crate) mod kernels;

use std::sync::Arc;

pub use gradcheck::{
    grad_check, relative_error, Coords, GradCheckEntry, GradCheckOptions, GradCheckReport,
};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting a dims/data length mismatch and any
    /// non-finite entry.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.contains(&0) || numel != data.len() {
            return Err(Error::shape("Tensor::new", &dims, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new".into()));
        }
        Ok(Self::from_parts(dims, data))
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![0.0; numel])
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let numel = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write access to the payload.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count, treating 1-d tensors as a single row.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 | 1 => 1,
            _ => self.dims[..self.dims.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            data: Arc::clone(&self.data),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every entry through `f32`, the on-disk precision.
    pub fn to_f32_precision(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        Self::from_parts(self.dims.clone(), data)
    }
}

#[cfg(test)]
mod tests;
