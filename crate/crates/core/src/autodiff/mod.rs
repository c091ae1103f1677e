//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records each operation as it executes. [`Graph::backward`]
//! walks the record once, in exact reverse order, and returns the gradients of
//! every leaf created with `requires_grad = true`. A graph holds one forward
//! pass; build a fresh one for the next.

mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

pub use gradcheck::{grad_check, relative_error};
pub use ops::{BatchStats, BnMode};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use ops::Op;

pub(crate) struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    backpropagated: Cell<bool>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), backpropagated: Cell::new(false) }
    }

    /// Records an input. Gradients are reported only for leaves that require them.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Backpropagates from a one-element `loss`.
    ///
    /// Leaf gradients accumulate additively when a leaf feeds several
    /// operations. Intermediate gradients are released as soon as they have
    /// been propagated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.backpropagated.get() {
            return Err(Error::State(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        self.backpropagated.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[id].take() else { continue };
            node.op.backward(&node.value, &upstream, &nodes, &mut |input, g| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            })?;
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }

    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}
