//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during one forward pass together
//! with the [`Op`] that produced it. [`Graph::backward`] then walks the tape
//! in reverse and accumulates gradients into the leaves.

use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation.
///
/// `forward` may stash whatever it needs for the backward pass on `self`.
pub trait Op<T: Float> {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Tensor<T>;

    /// Returns one gradient per input. Entries whose `needs[i]` is false may
    /// be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<dyn Op<T>>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), op: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn apply<O: Op<T> + 'static>(&mut self, mut op: O, inputs: &[Var]) -> Var {
        let value = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&refs)
        };
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            op: if needs_grad { Some(Box::new(op)) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every variable leaf.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let loss_value = &self.nodes[loss.0].value;
        assert_eq!(loss_value.len(), 1, "backward expects a scalar loss");
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads: leaf_grads };
        }
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..n).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                None => {
                    if node.needs_grad {
                        leaf_grads[idx] = Some(grad);
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
                    let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
                    for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        if !need {
                            continue;
                        }
                        let Some(g) = g else { continue };
                        assert_eq!(
                            g.shape(),
                            self.nodes[p].value.shape(),
                            "{} returned a gradient of the wrong shape",
                            op.name()
                        );
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Gradients { grads: leaf_grads }
    }
}

pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
