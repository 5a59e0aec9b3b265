//! Reverse-mode differentiation over a closed set of operations.
//!
//! A [`Graph`] is an append-only arena: every node's inputs have smaller
//! ids, so the arena order is already topological and the backward pass is
//! a single reverse sweep. Each operation's adjoint is written out by hand.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::align::{aligned_conv, aligned_conv_backward, aligned_conv_offset_grad, offset_grad_to_distances, OffsetField};
use crate::error::{shape_err, usage_err, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the masked per-cell IoU losses are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Lower clamp applied to IoU before the logarithm.
pub const IOU_EPS: Real = 1e-6;
/// Probability clamp of the cross-entropy.
pub const BCE_EPS: Real = 1e-7;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, geom: ConvGeometry },
    /// Adds `bias[c]` to every element of channel `c` of a `[C, H, W]` input.
    ChannelBias { input: NodeId, bias: NodeId },
    DepthwiseXcorr { search: NodeId, kernel: NodeId },
    /// Box-aligned convolution. With `boxes` set, gradients also flow into
    /// the `(l, t, r, b)` distance map the field was derived from.
    AlignedConv { input: NodeId, weight: NodeId, field: OffsetField, boxes: Option<(NodeId, Real)> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp { input: NodeId, lo: Real, hi: Real },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Real),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `-ln IoU` between predicted and target `(l, t, r, b)` maps over masked cells.
    IouLoss { pred: NodeId, targets: Tensor, mask: Tensor, reduction: Reduction },
    /// Class-balanced binary cross-entropy on probabilities.
    Bce { prob: NodeId, labels: Tensor, pos: Tensor, neg: Tensor },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = ops::conv2d(self.value(input), self.value(weight), geom)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Op::Conv2d { input, weight, geom }, v, rg))
    }

    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).dims3()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(shape_err!("bias of length {} for {} channels", b.len(), c));
        }
        let b = b.data().to_vec();
        let mut v = self.value(input).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += b[i / (h * w)];
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(Op::ChannelBias { input, bias }, v, rg))
    }

    pub fn depthwise_xcorr(&mut self, search: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = ops::depthwise_xcorr(self.value(search), self.value(kernel))?;
        let rg = self.rg(search) || self.rg(kernel);
        Ok(self.push(Op::DepthwiseXcorr { search, kernel }, v, rg))
    }

    /// Aligned convolution with a detached offset field.
    pub fn aligned_conv(&mut self, input: NodeId, weight: NodeId, field: OffsetField) -> Result<NodeId> {
        let v = aligned_conv(self.value(input), self.value(weight), &field)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Op::AlignedConv { input, weight, field, boxes: None }, v, rg))
    }

    /// Aligned convolution whose field was computed from the distance map
    /// `distances` on a grid of `stride`; the field stays differentiable.
    pub fn aligned_conv_coupled(
        &mut self,
        input: NodeId,
        weight: NodeId,
        field: OffsetField,
        distances: NodeId,
        stride: Real,
    ) -> Result<NodeId> {
        let v = aligned_conv(self.value(input), self.value(weight), &field)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(distances);
        Ok(self.push(Op::AlignedConv { input, weight, field, boxes: Some((distances, stride)) }, v, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(ops::relu);
        let rg = self.rg(x);
        self.push(Op::Relu(x), v, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(ops::sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), v, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(Float::exp).check_finite("exp")?;
        let rg = self.rg(x);
        Ok(self.push(Op::Exp(x), v, rg))
    }

    pub fn clamp(&mut self, x: NodeId, lo: Real, hi: Real) -> NodeId {
        let v = self.value(x).map(|t| t.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { input: x, lo, hi }, v, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?.check_finite("add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?.check_finite("mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, x: NodeId, s: Real) -> Result<NodeId> {
        let v = self.value(x).map(|t| t * s).check_finite("scale")?;
        let rg = self.rg(x);
        Ok(self.push(Op::Scale(x, s), v, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum()).check_finite("sum")?;
        let rg = self.rg(x);
        Ok(self.push(Op::Sum(x), v, rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(usage_err!("mean of empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as Real).check_finite("mean")?;
        let rg = self.rg(x);
        Ok(self.push(Op::Mean(x), v, rg))
    }

    /// Masked IoU regression loss, see [`crate::loss::iou_loss`].
    pub fn iou_loss(&mut self, pred: NodeId, targets: Tensor, mask: Tensor, reduction: Reduction) -> Result<NodeId> {
        let value = crate::loss::iou_loss_value(self.value(pred), &targets, &mask, reduction)?;
        let rg = self.rg(pred);
        Ok(self.push(Op::IouLoss { pred, targets, mask, reduction }, Tensor::scalar(value), rg))
    }

    /// Balanced cross-entropy, see [`crate::loss::bce_loss`].
    pub fn bce(&mut self, prob: NodeId, labels: Tensor, pos: Tensor, neg: Tensor) -> Result<NodeId> {
        let value = crate::loss::bce_loss(self.value(prob), &labels, &pos, &neg)?;
        let rg = self.rg(prob);
        Ok(self.push(Op::Bce { prob, labels, pos, neg }, Tensor::scalar(value), rg))
    }

    /// Back-propagates from a scalar `root`. Gradients of every node that
    /// depends on a parameter become available through [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(usage_err!("backward needs a scalar root, got shape {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, delta: Tensor| -> Result<()> {
            if !self.nodes[id.0].requires_grad {
                return Ok(());
            }
            match grads[id.0].as_mut() {
                Some(existing) => existing.axpy(1.0, &delta),
                None => {
                    grads[id.0] = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, geom } => {
                let (gx, gw) = ops::conv2d_backward(self.value(input), self.value(weight), geom, g, self.rg(input))?;
                if let Some(gx) = gx {
                    acc(input, gx)?;
                }
                acc(weight, gw)?;
            }
            &Op::ChannelBias { input, bias } => {
                let (c, h, w) = g.dims3()?;
                let gb = Tensor::from_fn(&[c], |ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().sum());
                acc(input, g.clone())?;
                acc(bias, gb.reshape(self.value(bias).shape())?)?;
            }
            &Op::DepthwiseXcorr { search, kernel } => {
                let (gs, gk) = ops::depthwise_xcorr_backward(self.value(search), self.value(kernel), g)?;
                acc(search, gs)?;
                acc(kernel, gk)?;
            }
            Op::AlignedConv { input, weight, field, boxes } => {
                let (gx, gw) = aligned_conv_backward(self.value(*input), self.value(*weight), field, g, self.rg(*input))?;
                if let Some(gx) = gx {
                    acc(*input, gx)?;
                }
                acc(*weight, gw)?;
                if let Some((dist, stride)) = *boxes {
                    if self.rg(dist) {
                        let og = aligned_conv_offset_grad(self.value(*input), self.value(*weight), field, g)?;
                        acc(dist, offset_grad_to_distances(&og, field.k, stride)?)?;
                    }
                }
            }
            &Op::Relu(x) => {
                let d = self.value(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                acc(x, d)?;
            }
            &Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                acc(x, d)?;
            }
            &Op::Exp(x) => {
                let d = node.value.zip_map(g, |e, gv| gv * e)?;
                acc(x, d)?;
            }
            &Op::Clamp { input, lo, hi } => {
                let d = self.value(input).zip_map(g, |v, gv| if v > lo && v < hi { gv } else { 0.0 })?;
                acc(input, d)?;
            }
            &Op::Add(a, b) => {
                acc(a, g.clone())?;
                acc(b, g.clone())?;
            }
            &Op::Mul(a, b) => {
                let da = self.value(b).zip_map(g, |y, gv| y * gv)?;
                let db = self.value(a).zip_map(g, |x, gv| x * gv)?;
                acc(a, da)?;
                acc(b, db)?;
            }
            &Op::Scale(x, s) => acc(x, g.map(|gv| gv * s))?,
            &Op::Reshape(x) => acc(x, g.clone().reshape(self.value(x).shape())?)?,
            &Op::Sum(x) => {
                let gv = g.item()?;
                acc(x, Tensor::full(self.value(x).shape(), gv))?;
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as Real;
                let gv = g.item()?;
                acc(x, Tensor::full(self.value(x).shape(), gv / n))?;
            }
            Op::IouLoss { pred, targets, mask, reduction } => {
                let d = crate::loss::iou_loss_grad(self.value(*pred), targets, mask, *reduction)?;
                let gv = g.item()?;
                acc(*pred, d.map(|v| v * gv))?;
            }
            Op::Bce { prob, labels, pos, neg } => {
                let d = crate::loss::bce_loss_grad(self.value(*prob), labels, pos, neg)?;
                let gv = g.item()?;
                acc(*prob, d.map(|v| v * gv))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_fn(&[2, 3], |i| i as Real));
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(p), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[3], 2.0));
        let b = g.constant(Tensor::full(&[3], 5.0));
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 5.0, 5.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[2], 3.0));
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn mean_of_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let m = g.mean(a).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.0);
    }
}
