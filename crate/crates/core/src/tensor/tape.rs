//! Operation tape for reverse-mode differentiation.
//!
//! Nodes are appended in forward order, so insertion order is already a
//! topological order of the DAG. Backward walks the nodes in reverse and
//! accumulates gradients additively at fan-out.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::{Result, Scalar, Shape, Tensor, TensorError};

/// Backward rule: upstream gradient in, one optional gradient per input slot
/// out (`None` for untracked inputs whose gradient is not needed).
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

pub(crate) struct Node<S: Scalar> {
    /// Tape ids of the differentiable inputs, aligned with the backward
    /// rule's output slots. `None` marks an untracked input.
    inputs: Vec<Option<usize>>,
    backward: BackwardFn<S>,
}

pub(crate) struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    numels: Vec<usize>,
    grads: Vec<Option<Vec<S>>>,
}

/// Recording context owning the operation DAG of one forward/backward pass.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

pub(crate) struct NodeHandle<S: Scalar> {
    tape: Rc<RefCell<TapeInner<S>>>,
    id: usize,
}

impl<S: Scalar> Clone for NodeHandle<S> {
    fn clone(&self) -> Self {
        NodeHandle {
            tape: Rc::clone(&self.tape),
            id: self.id,
        }
    }
}

impl<S: Scalar> NodeHandle<S> {
    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub(crate) fn tape(&self) -> Tape<S> {
        Tape {
            inner: Rc::clone(&self.tape),
        }
    }

    pub(crate) fn same_tape(&self, other: &NodeHandle<S>) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    pub(crate) fn grad_values(&self) -> Option<Vec<S>> {
        self.tape.borrow().grads.get(self.id)?.clone()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                numels: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Registers a tensor's values as a gradient-tracked leaf.
    pub fn leaf(&self, t: &Tensor<S>) -> Tensor<S> {
        let id = self.push(Vec::new(), Box::new(|_| Vec::new()), t.numel());
        Tensor::with_node(
            t.shape().clone(),
            t.values_arc(),
            Some(NodeHandle {
                tape: Rc::clone(&self.inner),
                id,
            }),
        )
    }

    /// Leaf constructed directly from raw values.
    pub fn var(&self, dims: &[usize], values: Vec<S>) -> Result<Tensor<S>> {
        let t = Tensor::from_vec(dims, values)?;
        Ok(self.leaf(&t))
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub(crate) fn push(
        &self,
        inputs: Vec<Option<usize>>,
        backward: BackwardFn<S>,
        numel: usize,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { inputs, backward });
        inner.numels.push(numel);
        inner.nodes.len() - 1
    }

    pub(crate) fn record(
        &self,
        shape: Shape,
        values: Arc<Vec<S>>,
        inputs: Vec<Option<usize>>,
        backward: BackwardFn<S>,
    ) -> Tensor<S> {
        let numel = values.len();
        let id = self.push(inputs, backward, numel);
        Tensor::with_node(
            shape,
            values,
            Some(NodeHandle {
                tape: Rc::clone(&self.inner),
                id,
            }),
        )
    }

    pub(crate) fn is_same(&self, handle: &NodeHandle<S>) -> bool {
        Rc::ptr_eq(&self.inner, &handle.tape)
    }

    /// Reverse pass from a scalar loss. Every tracked tensor on this tape can
    /// be queried for its gradient afterwards; gradients at fan-out sum.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        let handle = loss.node().ok_or(TensorError::NoTape)?;
        if !self.is_same(handle) {
            return Err(TensorError::TapeMismatch);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: loss.numel(),
            });
        }
        let root = handle.id();
        let mut grads: Vec<Option<Vec<S>>> = {
            let inner = self.inner.borrow();
            vec![None; inner.nodes.len()]
        };
        grads[root] = Some(vec![S::one()]);
        {
            let inner = self.inner.borrow();
            for id in (0..=root).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &inner.nodes[id];
                if !node.inputs.is_empty() {
                    let input_grads = (node.backward)(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (slot, gin) in input_grads.into_iter().enumerate() {
                        let (Some(in_id), Some(gin)) = (node.inputs[slot], gin) else {
                            continue;
                        };
                        debug_assert_eq!(gin.len(), inner.numels[in_id]);
                        match &mut grads[in_id] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&gin) {
                                    *a = *a + *b;
                                }
                            }
                            slot @ None => *slot = Some(gin),
                        }
                    }
                }
                grads[id] = Some(g);
            }
        }
        self.inner.borrow_mut().grads = grads;
        Ok(())
    }
}
