//! Eager tape of primitive tensor operations with reverse-mode gradients.
//!
//! Every call to [`Tape::apply`] evaluates the operation immediately and
//! appends a node. Node ids are creation indices, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::Tensor;

/// Floor applied before `ln` in [`Op::LogClamped`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Variance floor of [`Op::BatchNormalize`].
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Axis selection for reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    /// Reduce the last axis only, keeping the leading axes.
    Last,
}

/// Primitive operations. Attributes live in the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `a + b`; `b` may broadcast over leading axes when its shape is a suffix of `a`'s.
    Add,
    Sub,
    MulElementwise,
    Scale(f64),
    MatMul,
    /// Stride-1 convolution with symmetric zero padding. Inputs: x, weight, optional bias.
    Conv2d { padding: usize },
    Relu,
    AvgPool2d,
    GlobalAvgPool,
    /// Per-channel `gamma * x + beta` over (B,C,H,W) or (B,C).
    ChannelAffine,
    /// Per-channel normalization with the statistics of the current batch.
    BatchNormalize { eps: f64 },
    LogSoftmax,
    Exp,
    LogClamped,
    ReduceSum(Axes),
    ReduceMean(Axes),
    SelectRows(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::MulElementwise => "mul_elementwise",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::AvgPool2d => "avg_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::ChannelAffine => "channel_affine",
            Op::BatchNormalize { .. } => "batch_normalize",
            Op::LogSoftmax => "log_softmax",
            Op::Exp => "exp",
            Op::LogClamped => "log_clamped",
            Op::ReduceSum(_) => "reduce_sum",
            Op::ReduceMean(_) => "reduce_mean",
            Op::SelectRows(_) => "select_rows",
        }
    }
}

/// Values kept from the forward pass for the backward rule.
#[derive(Clone, Debug)]
enum Saved {
    None,
    /// Normalized activations and per-channel `1 / sqrt(var + eps)`.
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Saved,
}

/// Gradients for a requested set of leaf nodes.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, Saved::None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes
            .get(id.0)
            .is_some_and(|n| matches!(n.op, Op::Leaf))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, saved: Saved) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let name = op.name();
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownParam(format!("node {} not on tape", id.0)));
            }
        }
        let arity_ok = match &op {
            Op::Leaf => false,
            Op::Add | Op::Sub | Op::MulElementwise | Op::MatMul => inputs.len() == 2,
            Op::Conv2d { .. } => inputs.len() == 2 || inputs.len() == 3,
            Op::ChannelAffine => inputs.len() == 3,
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(name, format!("wrong input count {}", inputs.len())));
        }
        let x = |i: usize| &self.nodes[inputs[i].0].value;
        let mut saved = Saved::None;
        let out = match &op {
            Op::Leaf => unreachable!(),
            Op::Add => kernels::broadcast_binary(name, x(0), x(1), |a, b| a + b)?,
            Op::Sub => kernels::broadcast_binary(name, x(0), x(1), |a, b| a - b)?,
            Op::MulElementwise => {
                if x(0).shape() != x(1).shape() {
                    return Err(Error::shape(
                        name,
                        format!("{:?} vs {:?}", x(0).shape(), x(1).shape()),
                    ));
                }
                kernels::broadcast_binary(name, x(0), x(1), |a, b| a * b)?
            }
            Op::Scale(k) => x(0).map(|v| v * k),
            Op::MatMul => kernels::matmul(x(0), x(1))?,
            Op::Conv2d { padding } => {
                let bias = if inputs.len() == 3 { Some(x(2)) } else { None };
                kernels::conv2d(x(0), x(1), bias, *padding)?
            }
            Op::Relu => x(0).map(|v| v.max(0.0)),
            Op::AvgPool2d => kernels::avg_pool2(x(0))?,
            Op::GlobalAvgPool => kernels::global_avg_pool(x(0))?,
            Op::ChannelAffine => kernels::channel_affine(x(0), x(1), x(2))?,
            Op::BatchNormalize { eps } => {
                let (xhat, inv_std) = kernels::batch_normalize(x(0), *eps)?;
                saved = Saved::BatchNorm {
                    xhat: xhat.clone(),
                    inv_std,
                };
                xhat
            }
            Op::LogSoftmax => kernels::log_softmax(x(0)),
            Op::Exp => x(0).map(f64::exp),
            Op::LogClamped => x(0).map(|v| v.max(LOG_CLAMP).ln()),
            Op::ReduceSum(axes) => kernels::reduce_sum(x(0), *axes),
            Op::ReduceMean(axes) => {
                let t = x(0);
                let n = match axes {
                    Axes::All => t.len(),
                    Axes::Last => *t.shape().last().unwrap(),
                } as f64;
                kernels::reduce_sum(t, *axes).map(|v| v / n)
            }
            Op::SelectRows(rows) => x(0).select_rows(rows)?,
        };
        if !out.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(op, inputs.to_vec(), out, saved))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MulElementwise, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Op::Scale(k), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: usize,
    ) -> Result<NodeId> {
        let mut ins = vec![x, weight];
        ins.extend(bias);
        self.apply(Op::Conv2d { padding }, &ins)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn avg_pool2d(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::AvgPool2d, &[a])
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[a])
    }

    pub fn channel_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.apply(Op::ChannelAffine, &[x, gamma, beta])
    }

    pub fn batch_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::BatchNormalize { eps: BN_EPS }, &[x])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log_clamped(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogClamped, &[a])
    }

    pub fn reduce_sum(&mut self, a: NodeId, axes: Axes) -> Result<NodeId> {
        self.apply(Op::ReduceSum(axes), &[a])
    }

    pub fn reduce_mean(&mut self, a: NodeId, axes: Axes) -> Result<NodeId> {
        self.apply(Op::ReduceMean(axes), &[a])
    }

    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::SelectRows(rows), &[a])
    }

    /// Row-wise Shannon entropy (natural log, clamped) of the softmax of `logits`.
    /// Returns the entropies, shape `(B,)`, and the probabilities node.
    pub fn softmax_entropy(&mut self, logits: NodeId) -> Result<(NodeId, NodeId)> {
        let logp = self.log_softmax(logits)?;
        let p = self.exp(logp)?;
        let logp_clamped = self.log_clamped(p)?;
        let plogp = self.mul(p, logp_clamped)?;
        let neg_ent = self.reduce_sum(plogp, Axes::Last)?;
        Ok((self.scale(neg_ent, -1.0)?, p))
    }

    /// Reverse sweep from the scalar `loss`, returning gradients for `trainable`.
    ///
    /// Consumes the tape; a recording supports exactly one backward pass.
    pub fn backward(self, loss: NodeId, trainable: &[NodeId]) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::UnknownParam(format!("loss node {} not on tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for id in trainable {
            if !self.is_leaf(*id) {
                return Err(Error::UnknownParam(format!(
                    "trainable node {} is not a leaf on this tape",
                    id.0
                )));
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let input_grads = self.node_backward(node, &upstream)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; interior nodes no longer need theirs.
        }

        let mut out = BTreeMap::new();
        for &id in trainable {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn node_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![
                Some(dy.clone()),
                Some(kernels::unbroadcast(dy, input(1).shape())),
            ],
            Op::Sub => vec![
                Some(dy.clone()),
                Some(kernels::unbroadcast(dy, input(1).shape()).map(|v| -v)),
            ],
            Op::MulElementwise => {
                let (a, b) = (input(0), input(1));
                vec![Some(kernels::zip(dy, b, |g, b| g * b)), Some(kernels::zip(dy, a, |g, a| g * a))]
            }
            Op::Scale(k) => vec![Some(dy.map(|g| g * k))],
            Op::MatMul => {
                let (da, db) = kernels::matmul_backward(input(0), input(1), dy)?;
                vec![Some(da), Some(db)]
            }
            Op::Conv2d { padding } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    input(0),
                    input(1),
                    dy,
                    *padding,
                    node.inputs.len() == 3,
                )?;
                let mut v = vec![Some(dx), Some(dw)];
                if let Some(db) = db {
                    v.push(Some(db));
                }
                v
            }
            Op::Relu => vec![Some(kernels::zip(dy, input(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::AvgPool2d => vec![Some(kernels::avg_pool2_backward(dy, input(0).shape()))],
            Op::GlobalAvgPool => vec![Some(kernels::global_avg_pool_backward(dy, input(0).shape()))],
            Op::ChannelAffine => {
                let (dx, dg, db) = kernels::channel_affine_backward(input(0), input(1), dy);
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::BatchNormalize { .. } => {
                let Saved::BatchNorm { xhat, inv_std } = &node.saved else {
                    return Err(Error::Contract("batch_normalize lost its saved context".into()));
                };
                vec![Some(kernels::batch_normalize_backward(xhat, inv_std, dy))]
            }
            Op::LogSoftmax => vec![Some(kernels::log_softmax_backward(&node.value, dy))],
            Op::Exp => vec![Some(kernels::zip(dy, &node.value, |g, y| g * y))],
            Op::LogClamped => vec![Some(kernels::zip(dy, input(0), |g, x| {
                if x > LOG_CLAMP {
                    g / x
                } else {
                    0.0
                }
            }))],
            Op::ReduceSum(axes) => vec![Some(kernels::reduce_backward(dy, input(0).shape(), *axes, 1.0))],
            Op::ReduceMean(axes) => {
                let shape = input(0).shape();
                let n = match axes {
                    Axes::All => shape.iter().product::<usize>(),
                    Axes::Last => *shape.last().unwrap(),
                } as f64;
                vec![Some(kernels::reduce_backward(dy, shape, *axes, 1.0 / n))]
            }
            Op::SelectRows(rows) => vec![Some(kernels::select_rows_backward(dy, input(0).shape(), rows))],
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.leaf(vec_t(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_symmetric() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = t.log_softmax(x).unwrap();
        for v in t.value(y).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out.data()[corner], 4.0);
        }
    }

    #[test]
    fn scale_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[4]));
        let y = t.scale(x, 3.0).unwrap();
        let l = t.reduce_sum(y, Axes::All).unwrap();
        let g = t.backward(l, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec_t(&[1.0, 2.0]));
        let y = t.mul(x, x).unwrap();
        let l = t.reduce_sum(y, Axes::All).unwrap();
        let g = t.backward(l, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untouched_parameter_gets_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(vec_t(&[1.0, 2.0]));
        let unused = t.leaf(vec_t(&[5.0, 6.0, 7.0]));
        let l = t.reduce_sum(x, Axes::All).unwrap();
        let g = t.backward(l, &[x, unused]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec_t(&[1.0, 2.0]));
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_trainable_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec_t(&[1.0]));
        let l = t.reduce_sum(x, Axes::All).unwrap();
        assert!(matches!(t.clone().backward(l, &[NodeId(99)]), Err(Error::UnknownParam(_))));
        // interior node is not a valid trainable id
        assert!(matches!(t.backward(l, &[l]), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.leaf(vec_t(&[1.0, 2.0]));
        let b = t.leaf(vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(t.mul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn overflow_names_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(vec_t(&[1000.0]));
        assert!(matches!(t.exp(a), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn bias_broadcast_add() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = t.leaf(vec_t(&[1.0, 2.0, 3.0]));
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let l = t.reduce_sum(y, Axes::All).unwrap();
        let g = t.backward(l, &[b]).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
