//! Dense tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! The engine is deliberately small: it supports the handful of operations
//! the temporal CNN backbone, the transformation network and the training
//! losses need, and nothing else. Values are `f64` unless the crate is built
//! with the `f32` feature.

mod adam;
mod gemm;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use adam::AdamState;
pub use tape::{BatchNormStats, Mode, Tape, Var};

#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Row-major dense array with optional gradient storage.
///
/// Every tensor carries a process-unique id so a [`Tape`] can recognise the
/// same parameter when it is bound more than once in a forward pass. Cloning
/// hands out a new id: a clone is a distinct parameter.
#[derive(Debug)]
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Float>,
    requires_grad: bool,
    grad: Option<Vec<Float>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values but {} were given", data.len()),
            ));
        }
        Ok(Self {
            id: fresh_id(),
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("consistent by construction")
    }

    pub fn scalar(value: Float) -> Self {
        Self::new(Vec::new(), vec![value]).expect("scalar")
    }

    /// A trainable tensor: `requires_grad` set, gradient initially absent.
    pub fn param(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    /// Copy with a fresh id, gradients disabled and cleared.
    pub fn detached(&self) -> Self {
        Self {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[Float]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[Float]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of length {} for tensor of shape {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}

/// Anything that owns trainable tensors in a stable order.
pub trait Parameters {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}
