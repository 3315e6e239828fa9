//! Differentiable primitive operations.
//!
//! The primitive set is what the meta-learner bodies and heads need: dense and
//! 3x3 "same" convolution layers, elementwise arithmetic with the few fixed
//! broadcast forms the models use, reductions, the fused classification
//! heads (softmax cross-entropy, squared Euclidean / Mahalanobis distances),
//! and the straight-through scaled combinator that makes "forward everything,
//! back-propagate a subset" expressible.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::real::Real;
use crate::tape::{GradFlow, NodeId, Tape};
use crate::tensor::Tensor;

/// Operation selector for [`Tape::apply`].
#[derive(Clone, Debug)]
pub enum OpKind<R: Real> {
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    /// Stride 1, zero-padded "same" 3x3 convolution:
    /// `[B,Cin,H,W] x [Cout,Cin,3,3] -> [B,Cout,H,W]`.
    Conv2d3x3,
    Add,
    Sub,
    MulElem,
    Scale(R),
    Relu,
    MeanOverAxis(usize),
    SumOverAxis(usize),
    /// `[B,C,H,W] -> [B,C]`.
    GlobalAvgPool,
    /// Mean cross-entropy of `[M,C]` logits against class labels.
    SoftmaxCrossEntropy(Arc<Vec<usize>>),
    /// `[M,d] x [C,d] -> [M,C]` of squared Euclidean distances.
    EuclideanSqDist,
    /// `[M,d] x [C,d] x [C,d,d] -> [M,C]` of squared Mahalanobis distances.
    MahalanobisSqDist,
    Concat(usize),
    Transpose,
    Reshape(Vec<usize>),
    /// Value equals the (detached) first input exactly; gradient routes into
    /// the tracked second input scaled by the factor.
    StraightThroughScaled(R),
}

impl<R: Real> OpKind<R> {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d3x3 => "conv2d_3x3",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulElem => "mul_elementwise",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::MeanOverAxis(_) => "mean_over_axis",
            OpKind::SumOverAxis(_) => "sum_over_axis",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            OpKind::EuclideanSqDist => "euclidean_sq_dist",
            OpKind::MahalanobisSqDist => "mahalanobis_sq_dist",
            OpKind::Concat(_) => "concat",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::StraightThroughScaled(_) => "straight_through_scaled",
        }
    }
}

/// Broadcast forms accepted by `add` / `mul_elementwise`. Deliberately not
/// general broadcasting: just the shapes bias terms and FiLM need.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    None,
    /// rhs is a `[d]` (or `[1,d]`) vector applied to every row of `[B,d]`.
    Row,
    /// rhs is a `[C]` (or `[1,C]`) vector applied per channel of `[B,C,H,W]`.
    Channel,
    /// rhs is a `[B,1]` column applied across each row of `[B,d]`.
    Col,
}

fn resolve_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::None);
    }
    let rhs_vec_len = match rhs {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    };
    match lhs {
        [_, d] if rhs_vec_len == Some(*d) => return Ok(Broadcast::Row),
        [b, _] if rhs == [*b, 1] => return Ok(Broadcast::Col),
        [_, c, _, _] if rhs_vec_len == Some(*c) => return Ok(Broadcast::Channel),
        _ => {}
    }
    Err(Error::ShapeMismatch { op, detail: format!("lhs {lhs:?} vs rhs {rhs:?}") })
}

fn as2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        &[a, b] => Some((a, b)),
        _ => None,
    }
}

fn as4(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        &[a, b, c, d] => Some((a, b, c, d)),
        _ => None,
    }
}

/// Backward rule of a tape node. Parents that are `None` were detached at
/// record time and receive no gradient; saved buffers are shared `Arc`s.
#[derive(Clone)]
pub(crate) enum Rule<R: Real> {
    Leaf,
    MatMul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_val: Option<Arc<Vec<R>>>,
        b_val: Option<Arc<Vec<R>>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d3x3 {
        x: Option<NodeId>,
        ker: Option<NodeId>,
        x_val: Option<Arc<Vec<R>>>,
        ker_val: Option<Arc<Vec<R>>>,
        b: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
        bcast: Broadcast,
        lhs_shape: Vec<usize>,
    },
    Sub {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    MulElem {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_val: Option<Arc<Vec<R>>>,
        b_val: Option<Arc<Vec<R>>>,
        bcast: Broadcast,
        lhs_shape: Vec<usize>,
    },
    Scale {
        x: NodeId,
        factor: R,
    },
    Relu {
        x: NodeId,
        x_val: Arc<Vec<R>>,
    },
    ReduceAxis {
        x: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
        mean: bool,
    },
    GlobalAvgPool {
        x: NodeId,
        hw: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Arc<Vec<R>>,
        labels: Arc<Vec<usize>>,
        classes: usize,
    },
    EuclideanSqDist {
        q: Option<NodeId>,
        p: Option<NodeId>,
        q_val: Arc<Vec<R>>,
        p_val: Arc<Vec<R>>,
        m: usize,
        c: usize,
        d: usize,
    },
    MahalanobisSqDist {
        q: Option<NodeId>,
        mu: Option<NodeId>,
        sig: Option<NodeId>,
        q_val: Arc<Vec<R>>,
        mu_val: Arc<Vec<R>>,
        inv_val: Arc<Vec<R>>,
        m: usize,
        c: usize,
        d: usize,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
        outer: usize,
        inner: usize,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: NodeId,
    },
    StraightThrough {
        tracked: NodeId,
        scale: R,
    },
}

impl<R: Real> Tape<R> {
    /// Record a saved-for-backward buffer, counting it as retained activation
    /// memory only when its source is a tracked non-leaf value.
    fn save(&mut self, src: &Tensor<R>) -> Arc<Vec<R>> {
        self.count_activation(src, src.numel());
        src.data_arc()
    }

    fn count_activation(&mut self, src: &Tensor<R>, scalars: usize) {
        if let Some(id) = src.node() {
            if !self.is_leaf(id) {
                self.add_tracked_scalars(scalars as u64);
            }
        }
    }

    /// Apply a primitive op. The output value is the mathematical op applied
    /// to the input values; if gradients are enabled and any input is
    /// tracked, a tape node with the backward rule is appended.
    pub fn apply(&mut self, op: OpKind<R>, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let name = op.name();
        let arity_err = |want: usize| Error::ShapeMismatch {
            op: name,
            detail: format!("expected {want} inputs, got {}", inputs.len()),
        };
        let recording = |tape: &Tape<R>| tape.grad_enabled() && inputs.iter().any(|t| t.is_tracked());
        match op {
            OpKind::MatMul => {
                let [a, b] = inputs else { return Err(arity_err(2)) };
                let (Some((m, k)), Some((k2, n))) = (as2(a.shape()), as2(b.shape())) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-2 operands, got {:?} x {:?}", a.shape(), b.shape()),
                    });
                };
                if k != k2 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("inner dims {k} vs {k2} ({:?} x {:?})", a.shape(), b.shape()),
                    });
                }
                let out = kernels::matmul(a.data(), b.data(), m, k, n);
                let node = if recording(self) {
                    let b_val = a.is_tracked().then(|| self.save(b));
                    let a_val = b.is_tracked().then(|| self.save(a));
                    Some(self.push_node(
                        Rule::MatMul { a: a.node(), b: b.node(), a_val, b_val, m, k, n },
                        m * n,
                        false,
                    ))
                } else {
                    None
                };
                Ok(Tensor::from_parts(vec![m, n], out, node))
            }
            OpKind::Conv2d3x3 => {
                let [x, ker] = inputs else { return Err(arity_err(2)) };
                let (Some((b, cin, h, w)), Some((cout, kcin, kh, kw))) =
                    (as4(x.shape()), as4(ker.shape()))
                else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-4 operands, got {:?} x {:?}", x.shape(), ker.shape()),
                    });
                };
                if kcin != cin || kh != 3 || kw != 3 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("kernel {:?} does not match input {:?}", ker.shape(), x.shape()),
                    });
                }
                let out = kernels::conv2d_3x3(x.data(), ker.data(), b, cin, cout, h, w);
                let node = if recording(self) {
                    let x_val = ker.is_tracked().then(|| self.save(x));
                    let ker_val = x.is_tracked().then(|| self.save(ker));
                    Some(self.push_node(
                        Rule::Conv2d3x3 { x: x.node(), ker: ker.node(), x_val, ker_val, b, cin, cout, h, w },
                        b * cout * h * w,
                        false,
                    ))
                } else {
                    None
                };
                Ok(Tensor::from_parts(vec![b, cout, h, w], out, node))
            }
            OpKind::Add | OpKind::Sub | OpKind::MulElem => {
                let [a, b] = inputs else { return Err(arity_err(2)) };
                let is_sub = matches!(op, OpKind::Sub);
                let bcast = if is_sub {
                    if a.shape() != b.shape() {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                        });
                    }
                    Broadcast::None
                } else {
                    resolve_broadcast(name, a.shape(), b.shape())?
                };
                let out = match op {
                    OpKind::Add => kernels::binary(a.data(), b.data(), a.shape(), bcast, |x, y| x + y),
                    OpKind::Sub => kernels::binary(a.data(), b.data(), a.shape(), bcast, |x, y| x - y),
                    _ => kernels::binary(a.data(), b.data(), a.shape(), bcast, |x, y| x * y),
                };
                let node = if recording(self) {
                    let rule = match op {
                        OpKind::Add => Rule::Add {
                            a: a.node(),
                            b: b.node(),
                            bcast,
                            lhs_shape: a.shape().to_vec(),
                        },
                        OpKind::Sub => Rule::Sub { a: a.node(), b: b.node() },
                        _ => {
                            let b_val = a.is_tracked().then(|| self.save(b));
                            let a_val = b.is_tracked().then(|| self.save(a));
                            Rule::MulElem {
                                a: a.node(),
                                b: b.node(),
                                a_val,
                                b_val,
                                bcast,
                                lhs_shape: a.shape().to_vec(),
                            }
                        }
                    };
                    Some(self.push_node(rule, a.numel(), false))
                } else {
                    None
                };
                Ok(Tensor::from_parts(a.shape().to_vec(), out, node))
            }
            OpKind::Scale(factor) => {
                let [x] = inputs else { return Err(arity_err(1)) };
                let out: Vec<R> = x.data().iter().map(|&v| v * factor).collect();
                let node = match (recording(self), x.node()) {
                    (true, Some(id)) => {
                        Some(self.push_node(Rule::Scale { x: id, factor }, x.numel(), false))
                    }
                    _ => None,
                };
                Ok(Tensor::from_parts(x.shape().to_vec(), out, node))
            }
            OpKind::Relu => {
                let [x] = inputs else { return Err(arity_err(1)) };
                let out: Vec<R> =
                    x.data().iter().map(|&v| if v > R::zero() { v } else { R::zero() }).collect();
                let node = match (recording(self), x.node()) {
                    (true, Some(id)) => {
                        let x_val = self.save(x);
                        Some(self.push_node(Rule::Relu { x: id, x_val }, x.numel(), false))
                    }
                    _ => None,
                };
                Ok(Tensor::from_parts(x.shape().to_vec(), out, node))
            }
            OpKind::MeanOverAxis(axis) | OpKind::SumOverAxis(axis) => {
                let [x] = inputs else { return Err(arity_err(1)) };
                if axis >= x.shape().len() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("axis {axis} out of range for {:?}", x.shape()),
                    });
                }
                let mean = matches!(op, OpKind::MeanOverAxis(_));
                let outer: usize = x.shape()[..axis].iter().product();
                let axis_len = x.shape()[axis];
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let out = kernels::reduce_axis(x.data(), outer, axis_len, inner, mean);
                let mut out_shape: Vec<usize> = x.shape().to_vec();
                out_shape.remove(axis);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let node = match (recording(self), x.node()) {
                    (true, Some(id)) => Some(self.push_node(
                        Rule::ReduceAxis { x: id, outer, axis_len, inner, mean },
                        outer * inner,
                        false,
                    )),
                    _ => None,
                };
                Ok(Tensor::from_parts(out_shape, out, node))
            }
            OpKind::GlobalAvgPool => {
                let [x] = inputs else { return Err(arity_err(1)) };
                let Some((b, c, h, w)) = as4(x.shape()) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-4 input, got {:?}", x.shape()),
                    });
                };
                let out = kernels::global_avg_pool(x.data(), b, c, h, w);
                let node = match (recording(self), x.node()) {
                    (true, Some(id)) => {
                        Some(self.push_node(Rule::GlobalAvgPool { x: id, hw: h * w }, b * c, false))
                    }
                    _ => None,
                };
                Ok(Tensor::from_parts(vec![b, c], out, node))
            }
            OpKind::SoftmaxCrossEntropy(labels) => {
                let [logits] = inputs else { return Err(arity_err(1)) };
                let Some((m, c)) = as2(logits.shape()) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-2 logits, got {:?}", logits.shape()),
                    });
                };
                if labels.len() != m || labels.iter().any(|&y| y >= c) {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("labels (len {}) invalid for {m}x{c} logits", labels.len()),
                    });
                }
                let (loss, probs) = kernels::softmax_cross_entropy(logits.data(), &labels, m, c);
                let node = match (recording(self), logits.node()) {
                    (true, Some(id)) => {
                        self.count_activation(logits, probs.len());
                        Some(self.push_node(
                            Rule::SoftmaxCrossEntropy {
                                logits: id,
                                probs: Arc::new(probs),
                                labels,
                                classes: c,
                            },
                            1,
                            false,
                        ))
                    }
                    _ => None,
                };
                Ok(Tensor::from_parts(vec![1], vec![loss], node))
            }
            OpKind::EuclideanSqDist => {
                let [q, p] = inputs else { return Err(arity_err(2)) };
                let (Some((m, d)), Some((c, d2))) = (as2(q.shape()), as2(p.shape())) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-2 operands, got {:?} x {:?}", q.shape(), p.shape()),
                    });
                };
                if d != d2 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("feature dims {d} vs {d2}"),
                    });
                }
                let out = kernels::euclidean_sq_dist(q.data(), p.data(), m, c, d);
                let node = if recording(self) {
                    let q_val = self.save(q);
                    let p_val = self.save(p);
                    Some(self.push_node(
                        Rule::EuclideanSqDist { q: q.node(), p: p.node(), q_val, p_val, m, c, d },
                        m * c,
                        false,
                    ))
                } else {
                    None
                };
                Ok(Tensor::from_parts(vec![m, c], out, node))
            }
            OpKind::MahalanobisSqDist => {
                let [q, mu, sig] = inputs else { return Err(arity_err(3)) };
                let (Some((m, d)), Some((c, d2))) = (as2(q.shape()), as2(mu.shape())) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-2 queries/means, got {:?} x {:?}", q.shape(), mu.shape()),
                    });
                };
                if d != d2 || sig.shape() != [c, d, d].as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!(
                            "queries {:?}, means {:?}, covariances {:?}",
                            q.shape(),
                            mu.shape(),
                            sig.shape()
                        ),
                    });
                }
                let mut inv = vec![R::zero(); c * d * d];
                let half = R::from_f64(0.5);
                for cls in 0..c {
                    let block = &sig.data()[cls * d * d..(cls + 1) * d * d];
                    // Invert the symmetric part; the backward formula assumes it.
                    let mut sym = vec![R::zero(); d * d];
                    for r in 0..d {
                        for t in 0..d {
                            sym[r * d + t] = (block[r * d + t] + block[t * d + r]) * half;
                        }
                    }
                    let binv = linalg::spd_inverse(&sym, d)
                        .ok_or(Error::NotPositiveDefinite { class: cls })?;
                    inv[cls * d * d..(cls + 1) * d * d].copy_from_slice(&binv);
                }
                let out = kernels::mahalanobis_sq_dist(q.data(), mu.data(), &inv, m, c, d);
                let node = if recording(self) {
                    let q_val = self.save(q);
                    let mu_val = self.save(mu);
                    self.count_activation(sig, inv.len());
                    Some(self.push_node(
                        Rule::MahalanobisSqDist {
                            q: q.node(),
                            mu: mu.node(),
                            sig: sig.node(),
                            q_val,
                            mu_val,
                            inv_val: Arc::new(inv),
                            m,
                            c,
                            d,
                        },
                        m * c,
                        false,
                    ))
                } else {
                    None
                };
                Ok(Tensor::from_parts(vec![m, c], out, node))
            }
            OpKind::Concat(axis) => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let rank = inputs[0].shape().len();
                if axis >= rank {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("axis {axis} out of range for rank {rank}"),
                    });
                }
                for t in inputs {
                    if t.shape().len() != rank
                        || t.shape()
                            .iter()
                            .zip(inputs[0].shape())
                            .enumerate()
                            .any(|(i, (a, b))| i != axis && a != b)
                    {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            detail: format!(
                                "part {:?} incompatible with {:?} along axis {axis}",
                                t.shape(),
                                inputs[0].shape()
                            ),
                        });
                    }
                }
                let outer: usize = inputs[0].shape()[..axis].iter().product();
                let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
                let axis_total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
                let mut out = Vec::with_capacity(outer * axis_total * inner);
                for o in 0..outer {
                    for t in inputs {
                        let len = t.shape()[axis] * inner;
                        out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                    }
                }
                let mut out_shape = inputs[0].shape().to_vec();
                out_shape[axis] = axis_total;
                let node = if recording(self) {
                    let parts = inputs.iter().map(|t| (t.node(), t.shape()[axis])).collect();
                    Some(self.push_node(
                        Rule::Concat { parts, outer, inner },
                        outer * axis_total * inner,
                        false,
                    ))
                } else {
                    None
                };
                Ok(Tensor::from_parts(out_shape, out, node))
            }
            OpKind::Transpose => {
                let [x] = inputs else { return Err(arity_err(1)) };
                let Some((rows, cols)) = as2(x.shape()) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("need rank-2 input, got {:?}", x.shape()),
                    });
                };
                let out = kernels::transpose(x.data(), rows, cols);
                let node = match (recording(self), x.node()) {
                    (true, Some(id)) => {
                        Some(self.push_node(Rule::Transpose { x: id, rows, cols }, rows * cols, false))
                    }
                    _ => None,
                };
                Ok(Tensor::from_parts(vec![cols, rows], out, node))
            }
            OpKind::Reshape(new_shape) => {
                let [x] = inputs else { return Err(arity_err(1)) };
                if new_shape.iter().product::<usize>() != x.numel() || new_shape.iter().any(|&e| e == 0) {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("{:?} -> {:?}", x.shape(), new_shape),
                    });
                }
                let node = match (recording(self), x.node()) {
                    (true, Some(id)) => Some(self.push_node(Rule::Reshape { x: id }, x.numel(), false)),
                    _ => None,
                };
                Ok(Tensor::from_shared(new_shape, x.data_arc(), node))
            }
            OpKind::StraightThroughScaled(scale) => {
                let [full, tracked] = inputs else { return Err(arity_err(2)) };
                if full.shape() != tracked.shape() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        detail: format!("{:?} vs {:?}", full.shape(), tracked.shape()),
                    });
                }
                if full.is_tracked() {
                    return Err(Error::FullValueTracked);
                }
                let Some(tracked_id) = tracked.node() else {
                    return Err(Error::TrackedValueDetached);
                };
                // Output shares full_value's buffer: bit-identical by construction.
                let node = if self.grad_enabled() {
                    Some(self.push_node(
                        Rule::StraightThrough { tracked: tracked_id, scale },
                        full.numel(),
                        false,
                    ))
                } else {
                    None
                };
                Ok(Tensor::from_shared(full.shape().to_vec(), full.data_arc(), node))
            }
        }
    }
}

// Convenience wrappers; all routes go through `apply`.
impl<R: Real> Tape<R> {
    pub fn matmul(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn conv2d_3x3(&mut self, x: &Tensor<R>, kernel: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::Conv2d3x3, &[x, kernel])
    }
    pub fn add(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::MulElem, &[a, b])
    }
    pub fn scale(&mut self, x: &Tensor<R>, factor: R) -> Result<Tensor<R>> {
        self.apply(OpKind::Scale(factor), &[x])
    }
    pub fn relu(&mut self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn mean_over_axis(&mut self, x: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
        self.apply(OpKind::MeanOverAxis(axis), &[x])
    }
    pub fn sum_over_axis(&mut self, x: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
        self.apply(OpKind::SumOverAxis(axis), &[x])
    }
    pub fn global_avg_pool(&mut self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor<R>, labels: &[usize]) -> Result<Tensor<R>> {
        self.apply(OpKind::SoftmaxCrossEntropy(Arc::new(labels.to_vec())), &[logits])
    }
    pub fn euclidean_sq_dist(&mut self, queries: &Tensor<R>, points: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::EuclideanSqDist, &[queries, points])
    }
    pub fn mahalanobis_sq_dist(
        &mut self,
        queries: &Tensor<R>,
        means: &Tensor<R>,
        covariances: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        self.apply(OpKind::MahalanobisSqDist, &[queries, means, covariances])
    }
    pub fn concat(&mut self, parts: &[&Tensor<R>], axis: usize) -> Result<Tensor<R>> {
        self.apply(OpKind::Concat(axis), parts)
    }
    pub fn transpose(&mut self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply(OpKind::Transpose, &[x])
    }
    pub fn reshape(&mut self, x: &Tensor<R>, shape: Vec<usize>) -> Result<Tensor<R>> {
        self.apply(OpKind::Reshape(shape), &[x])
    }
    /// detach(full) + scale * (tracked - detach(tracked)): value is exactly
    /// `full_value`; backward routes `scale * g` into `tracked_value` only.
    pub fn straight_through_scaled(
        &mut self,
        full_value: &Tensor<R>,
        tracked_value: &Tensor<R>,
        scale: R,
    ) -> Result<Tensor<R>> {
        self.apply(OpKind::StraightThroughScaled(scale), &[full_value, tracked_value])
    }
}

/// Row-wise softmax, computed outside the tape (prediction paths).
pub fn softmax_rows<R: Real>(logits: &Tensor<R>) -> Tensor<R> {
    let (m, c) = as2(logits.shape()).expect("softmax_rows needs rank-2 input");
    let mut out = vec![R::zero(); m * c];
    for i in 0..m {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(row[0], |acc, &v| acc.max(v));
        let mut sum = R::zero();
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] = out[i * c + j] / sum;
        }
    }
    Tensor::from_parts(vec![m, c], out, None)
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn argmax_rows<R: Real>(t: &Tensor<R>) -> Vec<usize> {
    let (m, c) = as2(t.shape()).expect("argmax_rows needs rank-2 input");
    (0..m)
        .map(|i| {
            let row = &t.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl<R: Real> Rule<R> {
    pub(crate) fn backward(&self, g: &[R], flow: &mut GradFlow<R>) {
        match self {
            Rule::Leaf => {}
            Rule::MatMul { a, b, a_val, b_val, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(aid) = a {
                    let bv = b_val.as_ref().expect("matmul backward needs rhs value");
                    let buf = flow.buf(*aid);
                    // dA = g . B^T
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for kk in 0..k {
                                buf[i * k + kk] += gij * bv[kk * n + j];
                            }
                        }
                    }
                }
                if let Some(bid) = b {
                    let av = a_val.as_ref().expect("matmul backward needs lhs value");
                    let buf = flow.buf(*bid);
                    // dB = A^T . g
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                buf[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Rule::Conv2d3x3 { x, ker, x_val, ker_val, b, cin, cout, h, w } => {
                let (b, cin, cout, h, w) = (*b, *cin, *cout, *h, *w);
                if let Some(xid) = x {
                    let kv = ker_val.as_ref().expect("conv backward needs kernel value");
                    let buf = flow.buf(*xid);
                    kernels::conv2d_3x3_backward_input(g, kv, buf, b, cin, cout, h, w);
                }
                if let Some(kid) = ker {
                    let xv = x_val.as_ref().expect("conv backward needs input value");
                    let buf = flow.buf(*kid);
                    kernels::conv2d_3x3_backward_kernel(g, xv, buf, b, cin, cout, h, w);
                }
            }
            Rule::Add { a, b, bcast, lhs_shape } => {
                if let Some(aid) = a {
                    let buf = flow.buf(*aid);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += *gi;
                    }
                }
                if let Some(bid) = b {
                    let buf = flow.buf(*bid);
                    kernels::reduce_broadcast(g, buf, lhs_shape, *bcast, |acc, gi| *acc += gi);
                }
            }
            Rule::Sub { a, b } => {
                if let Some(aid) = a {
                    let buf = flow.buf(*aid);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += *gi;
                    }
                }
                if let Some(bid) = b {
                    let buf = flow.buf(*bid);
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o = *o - *gi;
                    }
                }
            }
            Rule::MulElem { a, b, a_val, b_val, bcast, lhs_shape } => {
                if let Some(aid) = a {
                    let bv = b_val.as_ref().expect("mul backward needs rhs value");
                    let buf = flow.buf(*aid);
                    kernels::mul_broadcast_into(g, bv, buf, lhs_shape, *bcast);
                }
                if let Some(bid) = b {
                    let av = a_val.as_ref().expect("mul backward needs lhs value");
                    let buf = flow.buf(*bid);
                    let mut idx = 0usize;
                    kernels::reduce_broadcast(g, buf, lhs_shape, *bcast, |acc, gi| {
                        *acc += gi * av[idx];
                        idx += 1;
                    });
                }
            }
            Rule::Scale { x, factor } => {
                let buf = flow.buf(*x);
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += *factor * *gi;
                }
            }
            Rule::Relu { x, x_val } => {
                let buf = flow.buf(*x);
                for i in 0..g.len() {
                    if x_val[i] > R::zero() {
                        buf[i] += g[i];
                    }
                }
            }
            Rule::ReduceAxis { x, outer, axis_len, inner, mean } => {
                let scale = if *mean {
                    R::one() / R::from_f64(*axis_len as f64)
                } else {
                    R::one()
                };
                let buf = flow.buf(*x);
                for o in 0..*outer {
                    for j in 0..*axis_len {
                        for i in 0..*inner {
                            buf[(o * axis_len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            Rule::GlobalAvgPool { x, hw } => {
                let scale = R::one() / R::from_f64(*hw as f64);
                let buf = flow.buf(*x);
                for (bc, gi) in g.iter().enumerate() {
                    let base = bc * hw;
                    for p in 0..*hw {
                        buf[base + p] += *gi * scale;
                    }
                }
            }
            Rule::SoftmaxCrossEntropy { logits, probs, labels, classes } => {
                let m = labels.len();
                let inv_m = R::one() / R::from_f64(m as f64);
                let gs = g[0];
                let buf = flow.buf(*logits);
                for i in 0..m {
                    for j in 0..*classes {
                        let indicator = if labels[i] == j { R::one() } else { R::zero() };
                        buf[i * classes + j] += gs * inv_m * (probs[i * classes + j] - indicator);
                    }
                }
            }
            Rule::EuclideanSqDist { q, p, q_val, p_val, m, c, d } => {
                let (m, c, d) = (*m, *c, *d);
                let two = R::from_f64(2.0);
                if let Some(qid) = q {
                    let buf = flow.buf(*qid);
                    for i in 0..m {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            for t in 0..d {
                                buf[i * d + t] += two * gij * (q_val[i * d + t] - p_val[j * d + t]);
                            }
                        }
                    }
                }
                if let Some(pid) = p {
                    let buf = flow.buf(*pid);
                    for i in 0..m {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            for t in 0..d {
                                buf[j * d + t] -= two * gij * (q_val[i * d + t] - p_val[j * d + t]);
                            }
                        }
                    }
                }
            }
            Rule::MahalanobisSqDist { q, mu, sig, q_val, mu_val, inv_val, m, c, d } => {
                let (m, c, d) = (*m, *c, *d);
                let two = R::from_f64(2.0);
                let mut diff = vec![R::zero(); d];
                let mut bdiff = vec![R::zero(); d];
                for j in 0..c {
                    let binv = &inv_val[j * d * d..(j + 1) * d * d];
                    for i in 0..m {
                        let gij = g[i * c + j];
                        if gij == R::zero() {
                            continue;
                        }
                        for t in 0..d {
                            diff[t] = q_val[i * d + t] - mu_val[j * d + t];
                        }
                        for r in 0..d {
                            let mut acc = R::zero();
                            for t in 0..d {
                                acc += binv[r * d + t] * diff[t];
                            }
                            bdiff[r] = acc;
                        }
                        if let Some(qid) = q {
                            let buf = flow.buf(*qid);
                            for t in 0..d {
                                buf[i * d + t] += two * gij * bdiff[t];
                            }
                        }
                        if let Some(mid) = mu {
                            let buf = flow.buf(*mid);
                            for t in 0..d {
                                buf[j * d + t] -= two * gij * bdiff[t];
                            }
                        }
                        if let Some(sid) = sig {
                            let buf = flow.buf(*sid);
                            let base = j * d * d;
                            for r in 0..d {
                                let br = gij * bdiff[r];
                                for t in 0..d {
                                    buf[base + r * d + t] -= br * bdiff[t];
                                }
                            }
                        }
                    }
                }
            }
            Rule::Concat { parts, outer, inner } => {
                let axis_total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0usize;
                for (node, len) in parts {
                    if let Some(id) = node {
                        let seg = len * inner;
                        let buf = flow.buf(*id);
                        for o in 0..*outer {
                            let src = (o * axis_total + offset) * inner;
                            for i in 0..seg {
                                buf[o * seg + i] += g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Rule::Transpose { x, rows, cols } => {
                // g has shape [cols, rows]; scatter back transposed.
                let buf = flow.buf(*x);
                for r in 0..*cols {
                    for c in 0..*rows {
                        buf[c * cols + r] += g[r * rows + c];
                    }
                }
            }
            Rule::Reshape { x } => {
                let buf = flow.buf(*x);
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += *gi;
                }
            }
            Rule::StraightThrough { tracked, scale } => {
                let buf = flow.buf(*tracked);
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += *scale * *gi;
                }
            }
        }
    }
}

pub(crate) mod kernels {
    use super::*;

    pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == R::zero() {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        out
    }

    pub fn transpose<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
        let mut out = vec![R::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }

    pub fn conv2d_3x3<R: Real>(
        x: &[R],
        ker: &[R],
        b: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) -> Vec<R> {
        let mut out = vec![R::zero(); b * cout * h * w];
        for bi in 0..b {
            for o in 0..cout {
                for i in 0..cin {
                    let xplane = &x[(bi * cin + i) * h * w..(bi * cin + i + 1) * h * w];
                    let kbase = (o * cin + i) * 9;
                    let oplane_base = (bi * cout + o) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = R::zero();
                            for dy in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..3usize {
                                    let sx = xx as isize + dx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += xplane[sy as usize * w + sx as usize]
                                        * ker[kbase + dy * 3 + dx];
                                }
                            }
                            out[oplane_base + y * w + xx] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn conv2d_3x3_backward_input<R: Real>(
        g: &[R],
        ker: &[R],
        dx: &mut [R],
        b: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) {
        for bi in 0..b {
            for o in 0..cout {
                let gplane = &g[(bi * cout + o) * h * w..(bi * cout + o + 1) * h * w];
                for i in 0..cin {
                    let kbase = (o * cin + i) * 9;
                    let dplane_base = (bi * cin + i) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = gplane[y * w + xx];
                            if gv == R::zero() {
                                continue;
                            }
                            for dy in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx_ in 0..3usize {
                                    let sx = xx as isize + dx_ as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    dx[dplane_base + sy as usize * w + sx as usize] +=
                                        gv * ker[kbase + dy * 3 + dx_];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn conv2d_3x3_backward_kernel<R: Real>(
        g: &[R],
        x: &[R],
        dk: &mut [R],
        b: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) {
        for bi in 0..b {
            for o in 0..cout {
                let gplane = &g[(bi * cout + o) * h * w..(bi * cout + o + 1) * h * w];
                for i in 0..cin {
                    let xplane = &x[(bi * cin + i) * h * w..(bi * cin + i + 1) * h * w];
                    let kbase = (o * cin + i) * 9;
                    for dy in 0..3usize {
                        for dx_ in 0..3usize {
                            let mut acc = R::zero();
                            for y in 0..h {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xx in 0..w {
                                    let sx = xx as isize + dx_ as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += gplane[y * w + xx] * xplane[sy as usize * w + sx as usize];
                                }
                            }
                            dk[kbase + dy * 3 + dx_] += acc;
                        }
                    }
                }
            }
        }
    }

    /// Elementwise binary op with the limited broadcast forms.
    pub fn binary<R: Real>(
        a: &[R],
        b: &[R],
        lhs_shape: &[usize],
        bcast: Broadcast,
        f: impl Fn(R, R) -> R,
    ) -> Vec<R> {
        match bcast {
            Broadcast::None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => {
                let d = *lhs_shape.last().unwrap();
                a.iter().enumerate().map(|(i, &x)| f(x, b[i % d])).collect()
            }
            Broadcast::Col => {
                let d = *lhs_shape.last().unwrap();
                a.iter().enumerate().map(|(i, &x)| f(x, b[i / d])).collect()
            }
            Broadcast::Channel => {
                let c = lhs_shape[1];
                let hw = lhs_shape[2] * lhs_shape[3];
                a.iter().enumerate().map(|(i, &x)| f(x, b[(i / hw) % c])).collect()
            }
        }
    }

    /// g (full lhs shape) multiplied elementwise against the broadcast rhs
    /// value, accumulated into `buf` (full lhs shape). Used for d_lhs of mul.
    pub fn mul_broadcast_into<R: Real>(
        g: &[R],
        rhs: &[R],
        buf: &mut [R],
        lhs_shape: &[usize],
        bcast: Broadcast,
    ) {
        match bcast {
            Broadcast::None => {
                for i in 0..g.len() {
                    buf[i] += g[i] * rhs[i];
                }
            }
            Broadcast::Row => {
                let d = *lhs_shape.last().unwrap();
                for i in 0..g.len() {
                    buf[i] += g[i] * rhs[i % d];
                }
            }
            Broadcast::Col => {
                let d = *lhs_shape.last().unwrap();
                for i in 0..g.len() {
                    buf[i] += g[i] * rhs[i / d];
                }
            }
            Broadcast::Channel => {
                let c = lhs_shape[1];
                let hw = lhs_shape[2] * lhs_shape[3];
                for i in 0..g.len() {
                    buf[i] += g[i] * rhs[(i / hw) % c];
                }
            }
        }
    }

    /// Walk g in order, mapping each element to its broadcast-reduced slot in
    /// `buf` and applying `f(&mut buf[slot], g[i])`.
    pub fn reduce_broadcast<R: Real>(
        g: &[R],
        buf: &mut [R],
        lhs_shape: &[usize],
        bcast: Broadcast,
        mut f: impl FnMut(&mut R, R),
    ) {
        match bcast {
            Broadcast::None => {
                for i in 0..g.len() {
                    f(&mut buf[i], g[i]);
                }
            }
            Broadcast::Row => {
                let d = *lhs_shape.last().unwrap();
                for i in 0..g.len() {
                    f(&mut buf[i % d], g[i]);
                }
            }
            Broadcast::Col => {
                let d = *lhs_shape.last().unwrap();
                for i in 0..g.len() {
                    f(&mut buf[i / d], g[i]);
                }
            }
            Broadcast::Channel => {
                let c = lhs_shape[1];
                let hw = lhs_shape[2] * lhs_shape[3];
                for i in 0..g.len() {
                    f(&mut buf[(i / hw) % c], g[i]);
                }
            }
        }
    }

    pub fn reduce_axis<R: Real>(
        x: &[R],
        outer: usize,
        axis_len: usize,
        inner: usize,
        mean: bool,
    ) -> Vec<R> {
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..axis_len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * axis_len + j) * inner + i];
                }
            }
        }
        if mean {
            let inv = R::one() / R::from_f64(axis_len as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        out
    }

    pub fn global_avg_pool<R: Real>(x: &[R], b: usize, c: usize, h: usize, w: usize) -> Vec<R> {
        let hw = h * w;
        let inv = R::one() / R::from_f64(hw as f64);
        let mut out = vec![R::zero(); b * c];
        for bc in 0..b * c {
            let mut acc = R::zero();
            for p in 0..hw {
                acc += x[bc * hw + p];
            }
            out[bc] = acc * inv;
        }
        out
    }

    /// Returns (mean loss, probs).
    pub fn softmax_cross_entropy<R: Real>(
        logits: &[R],
        labels: &[usize],
        m: usize,
        c: usize,
    ) -> (R, Vec<R>) {
        let mut probs = vec![R::zero(); m * c];
        let mut loss = R::zero();
        for i in 0..m {
            let row = &logits[i * c..(i + 1) * c];
            let max = row.iter().fold(row[0], |acc, &v| acc.max(v));
            let mut sum = R::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            let log_sum = sum.ln() + max;
            for j in 0..c {
                probs[i * c + j] = probs[i * c + j] / sum;
            }
            loss += log_sum - row[labels[i]];
        }
        (loss / R::from_f64(m as f64), probs)
    }

    pub fn euclidean_sq_dist<R: Real>(q: &[R], p: &[R], m: usize, c: usize, d: usize) -> Vec<R> {
        let mut out = vec![R::zero(); m * c];
        for i in 0..m {
            for j in 0..c {
                let mut acc = R::zero();
                for t in 0..d {
                    let diff = q[i * d + t] - p[j * d + t];
                    acc += diff * diff;
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    pub fn mahalanobis_sq_dist<R: Real>(
        q: &[R],
        mu: &[R],
        inv: &[R],
        m: usize,
        c: usize,
        d: usize,
    ) -> Vec<R> {
        let mut out = vec![R::zero(); m * c];
        let mut diff = vec![R::zero(); d];
        for j in 0..c {
            let binv = &inv[j * d * d..(j + 1) * d * d];
            for i in 0..m {
                for t in 0..d {
                    diff[t] = q[i * d + t] - mu[j * d + t];
                }
                let mut acc = R::zero();
                for r in 0..d {
                    let mut row = R::zero();
                    for t in 0..d {
                        row += binv[r * d + t] * diff[t];
                    }
                    acc += diff[r] * row;
                }
                out[i * c + j] = acc;
            }
        }
        out
    }
}
