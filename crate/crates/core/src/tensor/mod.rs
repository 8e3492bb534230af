//! Dense row-major f32 tensors with optional reverse-mode gradient recording.
//!
//! A `Tensor` is an immutable value: shape plus shared storage. Ops produce
//! new tensors and, when a [`Tape`] is active on the current thread and an
//! operand is watched, record a backward closure so that [`Tape::backward`]
//! can push gradients from a scalar root to every watched leaf.
//!
//! Non-finite values are rejected at construction and after every op; NaN
//! and infinity surface as [`Error::Numeric`] instead of propagating.

pub mod io;
mod ops;
mod tape;
#[cfg(test)]
mod tests;

pub use tape::{finite_diff_check, Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies a node of the thread's active tape. `gen` guards against
/// tensors outliving the tape that recorded them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeTag {
    pub gen: u64,
    pub id: usize,
}

#[derive(Clone, Debug)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<NodeTag>,
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape { op: "new", detail: format!("zero-sized dim in {dims:?}") });
        }
        if numel(&dims) != data.len() {
            return Err(Error::Shape {
                op: "new",
                detail: format!("dims {dims:?} imply {} values, got {}", numel(&dims), data.len()),
            });
        }
        ensure_finite("new", &data)?;
        Ok(Tensor { dims, data: Arc::new(data), node: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: Arc::new(vec![0.0; numel(dims)]), node: None }
    }

    pub fn filled(dims: &[usize], value: f32) -> Result<Self> {
        Tensor::new(dims.to_vec(), vec![value; numel(dims)])
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero-sized dims are rejected at construction
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The single value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<f32> {
        if self.len() != 1 {
            return Err(Error::Shape {
                op: "item",
                detail: format!("expected scalar, got dims {:?}", self.dims),
            });
        }
        Ok(self.data[0])
    }

    /// Same storage, new shape. Keeps the gradient association: gradients are
    /// stored flat, so a reshape needs no tape node.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        if numel(dims) != self.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.dims, dims),
            });
        }
        Ok(Tensor { dims: dims.to_vec(), data: Arc::clone(&self.data), node: self.node })
    }

    /// Copy without any gradient association.
    pub fn detach(&self) -> Tensor {
        Tensor { dims: self.dims.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn is_traced(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeTag> {
        self.node
    }

    pub(crate) fn set_node(&mut self, tag: NodeTag) {
        self.node = Some(tag);
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Construct from already-validated parts (op outputs).
    pub(crate) fn from_op(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        Tensor { dims, data: Arc::new(data), node: None }
    }
}

pub(crate) fn ensure_finite(context: &str, data: &[f32]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            context: context.to_string(),
            detail: format!("value {} at flat index {pos} of {}", data[pos], data.len()),
        });
    }
    Ok(())
}
