//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op as it executes. Values live on the tape and
//! are addressed by copyable [`Var`] handles; [`Tape::backward`] walks the
//! record in reverse and returns a [`Gradients`] table. A fresh tape is built
//! for every forward pass.

pub(crate) mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::{CheckerboardPolicy, PadMode};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: maps `(upstream grad, input values,
/// output value)` to one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: ops::Op,
}

/// Ordered record of executed ops.
///
/// Every op's inputs are recorded before the op itself, so reverse recording
/// order is a valid reverse topological order.
pub struct Tape {
    nodes: Vec<Node>,
    checkerboard: CheckerboardPolicy,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checkerboard: CheckerboardPolicy::Error,
        }
    }

    pub fn set_checkerboard_policy(&mut self, policy: CheckerboardPolicy) {
        self.checkerboard = policy;
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: ops::Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: ops::Op) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            inputs.iter().all(|i| i.0 < self.nodes.len()),
            "op input recorded after the op"
        );
        debug_assert!(
            value.is_finite() || !inputs.iter().all(|i| self.nodes[i.0].value.is_finite()),
            "{} produced non-finite output from finite inputs",
            op.name()
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(
            value,
            ops::Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                lv.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.dims(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, ops::Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward_node(&self.nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss never reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss never reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.dims(v)))
    }
}
