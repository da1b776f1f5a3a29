use super::ops::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in execution order, which is a topological order, so
/// the backward pass is a single reverse sweep. A graph is built for one
/// forward pass and dropped afterwards.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) deterministic: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            deterministic: true,
        }
    }

    /// In deterministic mode (the default) every cross-sample reduction is
    /// summed sequentially in sample order; otherwise weight gradients are
    /// reduced in parallel in whatever order the thread pool produces.
    pub fn with_deterministic(mut self, on: bool) -> Self {
        self.deterministic = on;
        self
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records an input whose gradient the backward pass should report.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar `loss`, returning the gradient of every
    /// variable leaf that the loss depends on.
    ///
    /// Gradients from multiple paths are summed. Intermediate gradients are
    /// released as soon as the node that owns them has been processed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    root.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::from_vec(node.value.shape(), g)?);
                }
                _ => self.backward_node(idx, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: leaves })
    }

    /// Accumulation buffer for the gradient of `v`, or `None` when `v` does
    /// not need one.
    pub(crate) fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<T>>],
        v: Var,
    ) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a variable leaf, `None` when the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
