//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Nodes are appended in execution order, so the tape is
//! already topologically sorted: replaying it back to front from a scalar
//! root visits every node after all of its consumers.
//!
//! ```
//! use cmlm::numerics::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// What a backward rule sees when it runs.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Parent values, in the order the parents were recorded.
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Whether each parent needs a gradient at all.
    pub needs: &'a [bool],
}

/// Backward rule: returns one optional gradient per parent (in parent
/// order). Parents with `needs[i] == false` may be answered with `None`.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    is_leaf: bool,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input tensor. `requires_grad` leaves receive a gradient from
    /// [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            is_leaf: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub(crate) fn value(&self, id: NodeId) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an operation node. The output is rejected if it holds a
    /// non-finite value.
    pub fn record(
        &self,
        op: &str,
        parents: &[NodeId],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op.to_string(),
                index,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            is_leaf: false,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Element-wise operation with a caller-supplied derivative. Mostly
    /// useful for testing the gradient checker itself.
    pub fn custom_unary<'t>(
        &'t self,
        x: Var<'t, T>,
        forward: impl Fn(T) -> T,
        derivative: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let value = x.value().map(forward);
        self.record(
            "custom",
            &[x.id],
            value,
            Box::new(move |ctx| {
                let d = ctx.inputs[0].map(&derivative);
                let data = ctx.grad.data().iter().zip(d.data()).map(|(&a, &b)| a * b).collect();
                vec![Some(Tensor::new(ctx.grad.shape(), data).expect("same shape"))]
            }),
        )
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every `requires_grad` leaf gets an entry; leaves the root does not
    /// depend on get zeros.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = nodes
            .get(root.id)
            .ok_or_else(|| Error::Contract("backward root is not on this tape".into()))?;
        if !root_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(Tensor::ones(root_node.value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(&BackwardCtx {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut out = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(id, g);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Result of [`Tape::backward`]: one gradient per `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    /// Gradient for `var`; panics if `var` is not a `requires_grad` leaf.
    pub fn wrt(&self, var: Var<'_, T>) -> &Tensor<T> {
        self.grads
            .get(&var.id)
            .expect("gradient requested for a node that is not a trainable leaf")
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id)
    }

    pub fn by_id(&self) -> &HashMap<NodeId, Tensor<T>> {
        &self.grads
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
