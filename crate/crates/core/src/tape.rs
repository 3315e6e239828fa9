//! Wengert tape: reverse-mode AD via operation recording.
//!
//! The forward pass appends nodes (backward rule + saved values) to a linear
//! tape; `backward` replays them in reverse, scatter-adding vector-Jacobian
//! products into per-node gradient buffers. Parents of node `i` always have
//! id `< i`, so a single reverse sweep is a valid topological order.
//!
//! `tracked_count` measures retained memory: it counts the scalar elements of
//! saved buffers whose source was a tracked, non-leaf value — i.e. activations
//! a backward pass will need, excluding parameters and detached constants.
//! Computations run under [`Tape::with_grad_disabled`] append nothing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::Rule;
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node<R: Real> {
    pub(crate) rule: Rule<R>,
    pub(crate) out_len: usize,
    pub(crate) grad: Option<Vec<R>>,
    pub(crate) leaf: bool,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    grad_enabled: bool,
    tracked_count: u64,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, tracked_count: 0 }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Run `f` with gradient tracking off; every tensor produced inside is
    /// detached and the tape is left untouched.
    pub fn with_grad_disabled<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.grad_enabled;
        self.grad_enabled = false;
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    /// Register a leaf (parameter) value. The returned tensor shares the
    /// input's data and is attached to a fresh leaf node.
    pub fn leaf(&mut self, value: &Tensor<R>) -> Tensor<R> {
        let id = self.push_node(Rule::Leaf, value.numel(), true);
        Tensor::from_shared(value.shape().to_vec(), value.data_arc(), Some(id))
    }

    /// Scalar activation elements saved for backward so far.
    pub fn tracked_count(&self) -> u64 {
        self.tracked_count
    }

    /// Worst-case scalar count of the gradient buffers a backward pass can
    /// allocate: the sum of non-leaf node output sizes.
    pub fn grad_buffer_scalars(&self) -> u64 {
        self.nodes.iter().filter(|n| !n.leaf).map(|n| n.out_len as u64).sum()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].leaf
    }

    pub(crate) fn push_node(&mut self, rule: Rule<R>, out_len: usize, leaf: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { rule, out_len, grad: None, leaf });
        id
    }

    pub(crate) fn add_tracked_scalars(&mut self, n: u64) {
        self.tracked_count += n;
    }

    /// Accumulated gradient of a (leaf) node, if any flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&[R]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Back-propagate from a tracked scalar.
    ///
    /// Intermediate vector-Jacobian products live in per-call scratch
    /// buffers; only leaf (parameter) gradients persist, accumulating
    /// additively across repeated calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: &Tensor<R>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::LossNotScalar { numel: loss.numel() });
        }
        let Some(loss_id) = loss.node() else {
            return Err(Error::LossDetached);
        };
        let mut flow = GradFlow::new(self.nodes.iter().map(|n| n.out_len).collect());
        flow.buf(loss_id)[0] = R::one();
        for idx in (0..=loss_id.0).rev() {
            let Some(g) = flow.take(NodeId(idx)) else {
                continue;
            };
            let node = &mut self.nodes[idx];
            if node.leaf {
                let buf = node.grad.get_or_insert_with(|| vec![R::zero(); node.out_len]);
                for (o, gi) in buf.iter_mut().zip(&g) {
                    *o += *gi;
                }
                continue;
            }
            let rule = node.rule.clone();
            rule.backward(&g, &mut flow);
        }
        Ok(())
    }
}

/// Per-backward-call gradient scratch, indexed by node id.
pub(crate) struct GradFlow<R: Real> {
    bufs: Vec<Option<Vec<R>>>,
    out_lens: Vec<usize>,
}

impl<R: Real> GradFlow<R> {
    fn new(out_lens: Vec<usize>) -> Self {
        GradFlow { bufs: vec![None; out_lens.len()], out_lens }
    }

    /// Buffer for a node, zero-allocated on first touch.
    pub(crate) fn buf(&mut self, id: NodeId) -> &mut [R] {
        let len = self.out_lens[id.0];
        self.bufs[id.0].get_or_insert_with(|| vec![R::zero(); len])
    }

    fn take(&mut self, id: NodeId) -> Option<Vec<R>> {
        self.bufs[id.0].take()
    }
}
