//! Tape recording and the reverse pass.
//!
//! Node ids are assigned in creation order, so the id sequence is already a
//! topological order of the recorded graph: every parent precedes its
//! children. The backward sweep walks ids from the loss down to zero and
//! visits each node exactly once.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{NodeHandle, Scalar, Tensor};

/// Backward closure: upstream gradient in, one gradient per parent out.
type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

struct Node<T: Scalar> {
    parents: Vec<usize>,
    numel: usize,
    backward: Option<BackwardFn<T>>, // None for leaves
}

/// Records ops during the forward pass of one logical thread.
///
/// A tape is confined to the thread that built it (`Rc` handles are not
/// `Send`); independent graphs on separate tapes may run concurrently.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Rc<Self> {
        Rc::new(Tape {
            nodes: RefCell::new(Vec::new()),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Attach a tensor to this tape as a gradient-requiring leaf.
    pub fn leaf(self: &Rc<Self>, tensor: &Tensor<T>) -> Tensor<T> {
        assert!(
            tensor.node().is_none(),
            "leaf: tensor is already attached to a tape"
        );
        let id = self.push(Vec::new(), tensor.numel(), None);
        Tensor {
            data: tensor.data_arc(),
            shape: tensor.shape().to_vec(),
            node: Some(NodeHandle {
                tape: Rc::clone(self),
                id,
            }),
        }
    }

    pub(crate) fn push(
        &self,
        parents: Vec<usize>,
        numel: usize,
        backward: Option<BackwardFn<T>>,
    ) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            numel,
            backward,
        });
        id
    }
}

/// Gradients of the leaves reachable from the loss, keyed by leaf node id.
pub struct Gradients<T: Scalar> {
    by_id: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf tensor; zeros if no gradient
    /// flowed to it.
    pub fn get(&self, leaf: &Tensor<T>) -> Vec<T> {
        let node = leaf
            .node()
            .expect("Gradients::get: tensor is not attached to a tape");
        match self.by_id.get(&node.id) {
            Some(g) => g.clone(),
            None => vec![T::zero(); leaf.numel()],
        }
    }

    pub fn get_by_id(&self, id: usize) -> Option<&[T]> {
        self.by_id.get(&id).map(|v| v.as_slice())
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reverse sweep from a scalar loss; returns gradients for every leaf.
    ///
    /// Panics if the loss is not scalar or not tape-recorded.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape()
        );
        let handle = self
            .node()
            .expect("backward: loss is not attached to a tape");
        let tape = &handle.tape;
        let nodes = tape.nodes.borrow();

        let mut grads: Vec<Option<Vec<T>>> = vec![None; handle.id + 1];
        grads[handle.id] = Some(vec![T::one()]);

        let mut leaf_grads = HashMap::new();
        for id in (0..=handle.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            debug_assert_eq!(grad.len(), node.numel, "gradient size drift at node {id}");
            match &node.backward {
                None => {
                    leaf_grads.insert(id, grad);
                }
                Some(backward) => {
                    let parent_grads = backward(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        match &mut grads[pid] {
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(pg) {
                                    *a = *a + g;
                                }
                            }
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients {
            by_id: leaf_grads,
        }
    }
}

/// Record a new op output on the tape shared by `inputs`, if any input is
/// attached. Inputs from different tapes panic.
pub(crate) fn record<T: Scalar>(
    op: &str,
    inputs: &[&Tensor<T>],
    out_data: Vec<T>,
    out_shape: Vec<usize>,
    backward: impl FnOnce() -> BackwardFn<T>,
) -> Tensor<T> {
    super::debug_check_finite(op, &out_data);
    let mut tape: Option<&NodeHandle<T>> = None;
    for input in inputs {
        if let Some(h) = input.node() {
            match tape {
                None => tape = Some(h),
                Some(prev) => assert!(
                    Rc::ptr_eq(&prev.tape, &h.tape),
                    "{op}: inputs belong to different tapes"
                ),
            }
        }
    }
    let node = tape.map(|h| {
        let parents: Vec<usize> = inputs.iter().filter_map(|t| t.node().map(|n| n.id)).collect();
        let id = h.tape.push(parents, out_data.len(), Some(backward()));
        NodeHandle {
            tape: Rc::clone(&h.tape),
            id,
        }
    });
    Tensor::with_node(out_data, out_shape, node)
}

/// Variant of [`record`] where the backward closure produces gradients only
/// for the inputs that are tape-attached, in input order.
///
/// The closure receives the upstream gradient and a mask of which inputs
/// require grad, and must emit gradients for exactly the attached ones.
pub(crate) fn record_selective<T: Scalar>(
    op: &str,
    inputs: &[&Tensor<T>],
    out_data: Vec<T>,
    out_shape: Vec<usize>,
    backward: impl FnOnce(&[bool]) -> BackwardFn<T>,
) -> Tensor<T> {
    let mask: Vec<bool> = inputs.iter().map(|t| t.node().is_some()).collect();
    let attached: Vec<&Tensor<T>> = inputs
        .iter()
        .copied()
        .filter(|t| t.node().is_some())
        .collect();
    if attached.is_empty() {
        super::debug_check_finite(op, &out_data);
        return Tensor::with_node(out_data, out_shape, None);
    }
    record(op, &attached, out_data, out_shape, || backward(&mask))
}
