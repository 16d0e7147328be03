//! Minimal reverse-mode autodiff engine with the layer primitives the
//! segmentation networks need.
//!
//! Values are `f32` in row-major order; reductions (losses, batch-norm
//! statistics) accumulate in `f64` so gradient checks stay tight.

mod adam;
mod init;
mod ops;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use init::{xavier_init, zeros};
pub use ops::BnStats;
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Train/eval switch shared by every stochastic or stats-tracking op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// N-dimensional float array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A trainable tensor with Adam state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    /// Adds `grad` into the parameter's gradient buffer, allocating it on
    /// first use. Gradients accumulate until [`Parameter::zero_grad`].
    pub fn accumulate_grad(&mut self, grad: &[f32]) {
        assert_eq!(grad.len(), self.value.numel(), "gradient length mismatch for {}", self.name);
        match &mut self.value.grad {
            Some(g) => {
                for (gi, &di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => self.value.grad = Some(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.value.grad = None;
    }

    pub fn grad(&self) -> Result<&[f32]> {
        self.value
            .grad
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", self.name)))
    }
}
