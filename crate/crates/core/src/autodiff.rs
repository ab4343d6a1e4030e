//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to its
//! [`Tape`]. Nodes only reference earlier nodes, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use gesture_kd::autodiff::Tape;
//! use gesture_kd::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(2.0));
//! let y = tape.param(Tensor::scalar(3.0));
//! let loss = x.mul(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).item(), 3.0);
//! assert_eq!(grads.wrt(y).item(), 2.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A gradient contribution flowing from a node to one of its parents.
pub enum GradPart {
    /// Gradient with the parent's full shape.
    Dense(Tensor),
    /// Gradient touching only a contiguous column band of the parent viewed
    /// as `[rows, row_len]`; `data` is `[rows, width]`.
    Band {
        rows: usize,
        row_len: usize,
        start: usize,
        width: usize,
        data: Vec<f64>,
    },
}

/// Computes parent gradients from the node's output gradient. The mask says
/// which parents need a gradient; entries for the others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<GradPart>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Ordered record of evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a tensor on the tape, honouring its `requires_grad` flag.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad();
        self.push_node(t, Vec::new(), None, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push_node(t, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_node(t, Vec::new(), None, false)
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records an operation result. The node requires a gradient when any
    /// parent does; otherwise its backward closure is dropped.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[usize],
        backward: BackwardFn,
    ) -> Result<Var<'_>> {
        value.ensure_finite(op)?;
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let bw = if rg { Some(backward) } else { None };
        Ok(self.push_node(value, parents.to_vec(), bw, rg))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// that requires one and is reachable from the loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parts = bw(&g, &mask);
            debug_assert_eq!(parts.len(), node.parents.len());
            for ((&p, part), need) in node.parents.iter().zip(parts).zip(mask) {
                if !need {
                    continue;
                }
                if let Some(part) = part {
                    accumulate(&mut grads[p], part, nodes[p].value.shape());
                }
            }
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let n = &nodes[id];
                if n.backward.is_none() && n.requires_grad {
                    g
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate(slot: &mut Option<Tensor>, part: GradPart, shape: &[usize]) {
    match part {
        GradPart::Dense(t) => match slot {
            None => *slot = Some(t),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        },
        GradPart::Band {
            rows,
            row_len,
            start,
            width,
            data,
        } => {
            let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
            let buf = acc.data_mut();
            for r in 0..rows {
                let dst = &mut buf[r * row_len + start..r * row_len + start + width];
                for (a, b) in dst.iter_mut().zip(&data[r * width..(r + 1) * width]) {
                    *a += b;
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when no path from the loss reaches it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone().with_requires_grad(false);
        self.tape.constant(v)
    }
}
