//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major buffers. Ops are pure functions: they
//! compute a fresh output and, when any input participates in a [`Tape`],
//! record a backward closure on that tape. Gradients come from
//! [`Tensor::backward`] on a scalar loss.
//!
//! Shape violations panic with a message naming the op and both shapes;
//! this mirrors how dense-array crates treat programmer errors. Debug
//! builds additionally assert that every op output is finite.

mod conv;
pub mod gradcheck;
mod kernels;
mod linalg;
mod nn;
mod ops;
mod tape;

pub use linalg::WindowMap;
pub use tape::{Gradients, Tape};

use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

/// Scalar element type of a tensor: `f32` for training, `f64` for
/// finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const NEG_MASK: Self;
}

impl Scalar for f32 {
    const NEG_MASK: Self = -1e9;
}
impl Scalar for f64 {
    const NEG_MASK: Self = -1e9;
}

/// Convert an `f64` constant to the active scalar type.
#[inline]
pub fn t<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant not representable in scalar type")
}

pub(crate) struct NodeHandle<T: Scalar> {
    pub(crate) tape: Rc<Tape<T>>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for NodeHandle<T> {
    fn clone(&self) -> Self {
        NodeHandle {
            tape: Rc::clone(&self.tape),
            id: self.id,
        }
    }
}

/// Dense n-dimensional array with optional tape participation.
pub struct Tensor<T: Scalar = f32> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    node: Option<NodeHandle<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a flat row-major buffer.
    ///
    /// Panics if `data.len() != product(shape)`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "from_vec: buffer length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![T::zero(); shape.iter().product()], shape)
    }

    /// Convert an f64 buffer into the active scalar type.
    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Self {
        Tensor::from_vec(data.iter().map(|&v| t::<T>(v)).collect(), shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![value], &[])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item: expected a scalar tensor, got shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Whether this tensor is connected to a tape.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, disconnected from any tape.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<&NodeHandle<T>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(data: Vec<T>, shape: Vec<usize>, node: Option<NodeHandle<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            data: Arc::new(data),
            shape,
            node,
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Share an existing buffer without copying; no tape attachment.
    pub(crate) fn from_arc(data: Arc<Vec<T>>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            data,
            shape,
            node: None,
        }
    }
}

/// Panic helper for binary shape mismatches; names the op and both shapes.
#[inline]
pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("{op}: shape mismatch {a:?} vs {b:?}");
}

#[inline]
pub(crate) fn debug_check_finite<T: Scalar>(op: &str, data: &[T]) {
    if cfg!(debug_assertions) {
        for (i, v) in data.iter().enumerate() {
            debug_assert!(
                v.is_finite(),
                "{op}: non-finite output {v} at flat index {i}"
            );
        }
    }
}

/// Strides of a row-major layout split at `axis`: (outer, len, inner).
#[inline]
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(
        axis < shape.len(),
        "axis {axis} out of range for shape {shape:?}"
    );
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
