//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation reads earlier
//! nodes and appends one new node, so insertion order is already a
//! topological order and the backward sweep is a single reverse pass.
//!
//! Operations live in the sibling modules as `impl Tape` blocks; fused
//! kernels defined elsewhere in the crate (sparse attention, selective scan)
//! hook in through [`Tape::push_op`].

mod conv;
pub use conv::conv2d_forward;
pub mod gradcheck;
mod ops;
pub(crate) use ops::gemm;
pub use ops::{gelu, gelu_grad, sigmoid, softplus, L2_NORM_EPS, LAYER_NORM_EPS};
mod shape_ops;
mod softmax;
pub mod topk;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use topk::{select_top_k, top_k_support, Mask};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` and `output` are the forward values; `needs[i]` tells whether
/// input `i` wants a gradient. Entries for inputs that do not need one may
/// be `None`.
pub(crate) trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward>>,
    requires_grad: bool,
    leaf: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad, leaf: true });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with [`param`](Self::param).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records an operation whose value has already been computed.
    pub(crate) fn push_op(&mut self, value: Tensor, inputs: &[Var], backward: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let backward: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, inputs: inputs.to_vec(), backward, requires_grad, leaf: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Propagates d`loss`/d(node) to every reachable leaf and adds the
    /// result into the leaf gradient buffers. Calling it twice accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape())));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.leaf {
                if node.requires_grad {
                    match &mut self.grads[idx] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            if node.inputs.iter().any(|i| i.0 >= idx) {
                return Err(Error::Backward(format!("node {idx} reads a later node")));
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = bw.backward(&inputs, &node.value, &g, &needs)?;
            for (k, (inp, ig)) in node.inputs.iter().zip(input_grads).enumerate() {
                let Some(ig) = ig else { continue };
                if !needs[k] {
                    continue;
                }
                if ig.shape() != self.nodes[inp.0].value.shape() {
                    return Err(Error::Backward(format!(
                        "gradient shape {:?} does not match input shape {:?} at node {idx}",
                        ig.shape(),
                        self.nodes[inp.0].value.shape()
                    )));
                }
                match &mut pending[inp.0] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}
