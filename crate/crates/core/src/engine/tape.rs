//! Reverse-mode recording.
//!
//! A [`Tape`] records every differentiable operation applied to tracked
//! [`Var`]s. Each record holds the ids of its inputs and a backward rule
//! that maps the output gradient to input gradients; tensors needed by the
//! rule are captured by the rule itself, so anything not needed for the
//! backward pass is freed as soon as its last `Var` goes away.
//!
//! Ids grow monotonically, so recording order is a topological order and
//! the backward sweep simply walks ids in reverse.

use std::cell::RefCell;
use std::fmt;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps the output gradient to one gradient per input. The flag slice says
/// which inputs are tracked; rules may return `None` for the others.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    shape: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations on tracked values.
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that records nothing; every `Var` on it is a constant.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (`requires_grad = true` when recording).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        if !self.recording {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            shape: value.shape().to_vec(),
            backward: None,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        inputs: &[&Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let tracked = self.recording && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return self.constant(value);
        }
        for v in inputs {
            debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: inputs.iter().map(|v| v.id).collect(),
            shape: value.shape().to_vec(),
            backward: Some(backward),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Back-propagates from a scalar `loss`, returning the gradient of every
    /// tracked leaf that the loss depends on.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss.id.ok_or_else(|| {
            Error::Contract("loss is not a tracked value on this tape".into())
        })?;
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = rule(&g, &needs)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), nodes[*pid].shape.as_slice(), "grad shape");
                grads[*pid] = Some(match grads[*pid].take() {
                    None => pg,
                    Some(acc) => kernels::binary("grad_acc", &acc, &pg, |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("recording", &self.recording)
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient of a leaf, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// A value flowing through a (possibly recording) computation.
#[derive(Clone)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: Option<usize>,
    pub(crate) value: Tensor<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// True when this value sits on the tape and can receive a gradient.
    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// The same value with gradient flow cut.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.value.clone())
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}
