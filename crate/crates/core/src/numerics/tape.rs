//! Reverse-mode tape.
//!
//! Every operation records its output value, its inputs, and an optional
//! backward rule mapping the output gradient to input gradients. Node ids
//! are assigned in creation order, so reverse id order is a valid
//! topological order for the backward sweep.
//!
//! Non-differentiable selections (stop-gradient values, nearest-code
//! indices) go through a [`FrozenLog`]. A recording tape appends them; a
//! replaying tape reads them back in order. Finite-difference probes replay
//! the log so that they differentiate the same surrogate function the
//! analytic backward pass differentiates.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Maps `(grad_out, inputs, output)` to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Values captured at non-differentiable points of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct FrozenLog {
    entries: Vec<Tensor>,
}

impl FrozenLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

enum FrozenMode {
    Record(FrozenLog),
    Replay { log: FrozenLog, cursor: usize },
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    frozen: RefCell<FrozenMode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            frozen: RefCell::new(FrozenMode::Record(FrozenLog::default())),
        }
    }

    /// A tape whose frozen points return the values of a previous recording.
    pub fn replaying(log: FrozenLog) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            frozen: RefCell::new(FrozenMode::Replay { log, cursor: 0 }),
        }
    }

    pub fn is_replaying(&self) -> bool {
        matches!(*self.frozen.borrow(), FrozenMode::Replay { .. })
    }

    /// Returns the recorded frozen values, leaving an empty log behind.
    pub fn take_frozen_log(&self) -> FrozenLog {
        match &mut *self.frozen.borrow_mut() {
            FrozenMode::Record(log) => std::mem::take(log),
            FrozenMode::Replay { log, .. } => log.clone(),
        }
    }

    /// Records `compute()` on a recording tape, or returns the next logged
    /// value on a replaying one.
    pub fn frozen(&self, compute: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        let mut mode = self.frozen.borrow_mut();
        match &mut *mode {
            FrozenMode::Record(log) => {
                let v = compute()?;
                log.entries.push(v.clone());
                Ok(v)
            }
            FrozenMode::Replay { log, cursor } => {
                let v = log.entries.get(*cursor).cloned().ok_or_else(|| {
                    Error::invalid("frozen log exhausted: replayed function diverged from recording")
                })?;
                *cursor += 1;
                Ok(v)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node("leaf", value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node("constant", value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation whose value has already been computed.
    ///
    /// Fails with [`Error::NonFinite`] if the value contains NaN or infinity.
    pub fn push_op(
        &self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push_node(op, value, inputs.to_vec(), backward, requires_grad))
    }

    /// Records a user-defined operation. Used for tests and extensions that
    /// need an operation outside the built-in set.
    pub fn custom_op(
        &self,
        op: &'static str,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor]) -> Result<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            forward(&vals)?
        };
        self.push_op(op, inputs, value, backward)
    }

    /// Runs `f` over borrowed input values.
    pub(crate) fn with_values<R>(&self, inputs: &[Var], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    fn push_node(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let backward = node
                .backward
                .as_ref()
                .ok_or_else(|| Error::MissingBackward(node.op.to_string()))?;
            let input_vals: Vec<&Tensor> =
                node.inputs.iter().map(|v| &nodes[v.0].value).collect();
            let input_grads = backward(&g, &input_vals, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    ig.shape(),
                    nodes[input.0].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for any node, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a node, zero-filled when absent.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&tape.shape(v)))
    }
}
