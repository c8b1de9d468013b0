//! Minimal reverse-mode automatic differentiation over dense 64-bit tensors.
//!
//! The graph is rebuilt on every forward pass (define-by-run). Trainable
//! parameters live outside the graph in a [`ParamSet`]; a pass inserts them
//! as leaves, runs [`Tape::backward`], and copies gradients back with
//! [`Tape::accumulate_param_grads`].

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a matrix: 2-d as is, 1-d as a single row, scalar as 1x1.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[0], self.data.len() / self.shape[0]),
        }
    }

    pub fn ensure_grad(&mut self) -> &mut Vec<f64> {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}
