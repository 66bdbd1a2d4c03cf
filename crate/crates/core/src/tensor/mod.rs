//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node of a computation
//! graph. Ops record their inputs when any input requires a gradient, and
//! [`Tensor::backward`] walks the recorded graph in reverse creation order,
//! accumulating gradients into every leaf created with `requires_grad`.
//!
//! Graphs are single-threaded (`Rc`); share raw [`Array`]s between threads
//! and bind them into a fresh graph per thread.

mod attention;
mod backward;
mod float;
mod ops;
pub(crate) mod shape;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use float::{Float, Precision};
pub(crate) use float::{gemm, Layout};
pub use attention::multi_head_attention;
pub use ops::{concat, embedding, layer_norm};

use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static STRICT: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Enable or disable strict mode on this thread, returning the old setting.
///
/// In strict mode `div` fails with [`TensorError::NonFinite`] instead of
/// producing infinities or NaNs.
pub fn set_strict(enabled: bool) -> bool {
    STRICT.with(|s| s.replace(enabled))
}

pub(crate) fn strict() -> bool {
    STRICT.with(|s| s.get())
}

/// Plain owned n-d array. `Send + Sync`, used for parameters, images and
/// anything that outlives a single graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> Array<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "array",
                msg: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Array<G> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

pub(crate) struct Node<F: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    op: Option<Op<F>>,
}

/// Graph tensor. Cloning is cheap and shares the node.
pub struct Tensor<F: Float = f32>(Rc<Node<F>>);

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<F: Float> Tensor<F> {
    fn build(shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Option<Op<F>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Result of an op: records `op` only when gradients are needed.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Self {
        if op.needs_grad() {
            Self::build(shape, data, true, Some(op))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Constant (no gradient) tensor.
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::checked(shape, data, false)
    }

    /// Trainable leaf.
    pub fn leaf(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::checked(shape, data, true)
    }

    fn checked(shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn from_array(array: &Array<F>, requires_grad: bool) -> Self {
        Self::build(array.shape.clone(), array.data.clone(), requires_grad, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn scalar(value: F) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![F::zero(); shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::build(shape.to_vec(), vec![value; shape.iter().product()], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.clone()
    }

    pub fn to_array(&self) -> Array<F> {
        Array {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
        }
    }

    /// First element as `f64`; intended for scalars.
    pub fn item(&self) -> f64 {
        self.0.data[0].as_f64()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Ref<'_, Vec<F>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn node(&self) -> &Node<F> {
        &self.0
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests;
