//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Ops execute eagerly and record themselves on a tape; `backward` walks
//! the tape in reverse. The recorded order is the topological order. A
//! graph instance is single-threaded; independent graphs may run
//! concurrently.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize, dilation: usize },
    BilinearResize { input: NodeId },
    Softmax2d { input: NodeId },
    ChannelAvgPool { input: NodeId, groups: usize },
    ChannelSelect { input: NodeId, indices: Vec<usize> },
    ChannelAffine { input: NodeId, gain: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Abs { input: NodeId },
    Clip01 { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sum { input: NodeId },
    Mean { input: NodeId },
    NegCc { a: NodeId, b: NodeId },
    KlDiv { p: NodeId, q: NodeId, eps: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // Per-model backward counters registered by model forward passes;
    // bumped once per backward so hold-out isolation can be audited.
    participants: Vec<Arc<AtomicU64>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node. `None`
    /// until `backward` has run; zero for nodes the loss does not use.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn register_participant(&mut self, counter: Arc<AtomicU64>) {
        self.participants.push(counter);
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {op:?}");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, grad: None });
        id
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf { requires_grad }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Cross-correlation of a CxHxW input with an OxCxKhxKw kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and dilation must be >= 1".into(),
            ));
        }
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        if ishape.len() != 3 {
            return Err(Error::shape("conv2d input", "rank 3 (CxHxW)", format!("{ishape:?}")));
        }
        if kshape.len() != 4 {
            return Err(Error::shape("conv2d kernel", "rank 4 (OxCxKhxKw)", format!("{kshape:?}")));
        }
        if kshape[1] != ishape[0] {
            return Err(Error::shape(
                "conv2d input-channel dimension",
                format!("kernel expects {} input channels", kshape[1]),
                format!("input has {}", ishape[0]),
            ));
        }
        if bshape != [kshape[0]] {
            return Err(Error::shape(
                "conv2d bias",
                format!("[{}]", kshape[0]),
                format!("{bshape:?}"),
            ));
        }
        let (h, w) = (ishape[1], ishape[2]);
        let (kh, kw) = (kshape[2], kshape[3]);
        let oh = conv_out(h, kh, stride, padding, dilation)?;
        let ow = conv_out(w, kw, stride, padding, dilation)?;

        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
            dilation,
            oh,
            ow,
        );
        Ok(self.push(Op::Conv2d { input, kernel, bias, stride, padding, dilation }, out))
    }

    /// Per-channel bilinear resize with the align-corners convention:
    /// corner pixels map exactly onto corner pixels.
    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("bilinear_resize target extent is zero".into()));
        }
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("bilinear_resize input", "rank 3 (CxHxW)", format!("{shape:?}")));
        }
        let out = bilinear_forward(self.value(input), out_h, out_w);
        Ok(self.push(Op::BilinearResize { input }, out))
    }

    /// Per-map softmax over all spatial positions of each channel.
    pub fn softmax2d(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("softmax2d input", "rank 3 (CxHxW)", format!("{shape:?}")));
        }
        let out = softmax2d_forward(self.value(input));
        Ok(self.push(Op::Softmax2d { input }, out))
    }

    /// Average contiguous channel blocks down to `groups` maps.
    pub fn channel_avg_pool(&mut self, input: NodeId, groups: usize) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("channel_avg_pool input", "rank 3 (CxHxW)", format!("{shape:?}")));
        }
        let c = shape[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::NonDivisibleChannels(c, groups));
        }
        let (h, w) = (shape[1], shape[2]);
        let block = c / groups;
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = vec![0.0; groups * hw];
        for g in 0..groups {
            let dst = &mut out[g * hw..(g + 1) * hw];
            for b in 0..block {
                let ch = g * block + b;
                let s = &src[ch * hw..(ch + 1) * hw];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += v;
                }
            }
            let inv = 1.0 / block as f64;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let t = Tensor::new(vec![groups, h, w], out)?;
        Ok(self.push(Op::ChannelAvgPool { input, groups }, t))
    }

    /// Copy out the listed channels, in order.
    pub fn channel_select(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("channel_select input", "rank 3 (CxHxW)", format!("{shape:?}")));
        }
        let c = shape[0];
        if indices.is_empty() || indices.iter().any(|&i| i >= c) {
            return Err(Error::InvalidArgument(format!(
                "channel_select indices {indices:?} out of range for {c} channels"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(indices.len() * hw);
        for &i in &indices {
            out.extend_from_slice(&src[i * hw..(i + 1) * hw]);
        }
        let t = Tensor::new(vec![indices.len(), h, w], out)?;
        Ok(self.push(Op::ChannelSelect { input, indices }, t))
    }

    /// Per-channel learned gain and bias, the inference-mode stand-in
    /// for batch normalization.
    pub fn channel_affine(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("channel_affine input", "rank 3 (CxHxW)", format!("{shape:?}")));
        }
        let c = shape[0];
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "channel_affine gain/bias",
                format!("[{c}]"),
                format!("{:?} / {:?}", self.value(gain).shape(), self.value(bias).shape()),
            ));
        }
        let hw = shape[1] * shape[2];
        let src = self.value(input).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            let (g, b) = (gd[ch], bd[ch]);
            out.extend(src[ch * hw..(ch + 1) * hw].iter().map(|&v| v * g + b));
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::ChannelAffine { input, gain, bias }, t))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(Op::Relu { input }, out)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid { input }, out)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(f64::abs);
        self.push(Op::Abs { input }, out)
    }

    /// Clamp to [0,1]; backward is straight-through inside the range and
    /// zero outside.
    pub fn clip01(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.clamp(0.0, 1.0));
        self.push(Op::Clip01 { input }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y)
    }

    fn zip_op(&mut self, name: &str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(
                name,
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(op, t))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out = self.value(input).map(|v| v * factor);
        self.push(Op::Scale { input, factor }, out)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        self.push(Op::Mean { input }, Tensor::scalar(m))
    }

    /// Fixed-weight combination of same-shaped nodes.
    pub fn weighted_sum(&mut self, parts: &[(NodeId, f64)]) -> Result<NodeId> {
        let (first, w0) = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum over no nodes".into()))?;
        let mut acc = self.scale(first, w0);
        for &(id, w) in &parts[1..] {
            let term = self.scale(id, w);
            acc = self.add(acc, term)?;
        }
        Ok(acc)
    }

    /// Negative Pearson correlation between two same-shaped tensors.
    pub fn neg_cc(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(
                "neg_cc",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let (_, _, sa, sb, sab) = centered_moments(va.data(), vb.data());
        if sa == 0.0 || sb == 0.0 {
            return Err(Error::InvalidArgument(
                "neg_cc requires non-constant inputs (zero variance)".into(),
            ));
        }
        let r = sab / (sa * sb).sqrt();
        Ok(self.push(Op::NegCc { a, b }, Tensor::scalar(-r)))
    }

    /// KL divergence sum(p ln(p/q)) averaged over channel maps. Each map
    /// is smoothed by `eps` and renormalized to sum 1 before the
    /// divergence is taken.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId, eps: f64) -> Result<NodeId> {
        let (vp, vq) = (self.value(p), self.value(q));
        if !vp.same_shape(vq) {
            return Err(Error::shape(
                "kl_div",
                format!("{:?}", vp.shape()),
                format!("{:?}", vq.shape()),
            ));
        }
        if vp.shape().len() != 3 {
            return Err(Error::shape("kl_div input", "rank 3 (CxHxW)", format!("{:?}", vp.shape())));
        }
        if eps < 0.0 {
            return Err(Error::InvalidArgument("kl_div smoothing must be >= 0".into()));
        }
        if vp.data().iter().chain(vq.data()).any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("kl_div inputs must be non-negative".into()));
        }
        let value = kl_forward(vp, vq, eps);
        Ok(self.push(Op::KlDiv { p, q, eps }, Tensor::scalar(value)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Which nodes the gradient-carrying leaves can influence; ops whose
    /// inputs are all constants need no backward work.
    fn influence(&self) -> Vec<bool> {
        let mut inf = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            inf[i] = match &node.op {
                Op::Leaf { requires_grad } => *requires_grad,
                Op::Conv2d { input, kernel, bias, .. } => inf[input.0] || inf[kernel.0] || inf[bias.0],
                Op::ChannelAffine { input, gain, bias } => inf[input.0] || inf[gain.0] || inf[bias.0],
                Op::BilinearResize { input }
                | Op::Softmax2d { input }
                | Op::ChannelAvgPool { input, .. }
                | Op::ChannelSelect { input, .. }
                | Op::Relu { input }
                | Op::Sigmoid { input }
                | Op::Abs { input }
                | Op::Clip01 { input }
                | Op::Scale { input, .. }
                | Op::Sum { input }
                | Op::Mean { input } => inf[input.0],
                Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::NegCc { a, b } => {
                    inf[a.0] || inf[b.0]
                }
                Op::KlDiv { p, q, .. } => inf[p.0] || inf[q.0],
            };
        }
        inf
    }

    /// Reverse pass from a scalar loss. Gradients land on every node;
    /// nodes the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let influenced = self.influence();
        for node in &mut self.nodes {
            node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !influenced[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Conv2d { input, kernel, bias, stride, padding, dilation } => {
                    let (din, dker, dbias) = conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &grad,
                        stride,
                        padding,
                        dilation,
                        influenced[input.0],
                        influenced[kernel.0] || influenced[bias.0],
                    );
                    if influenced[input.0] {
                        self.accumulate(input, &din);
                    }
                    if influenced[kernel.0] {
                        self.accumulate(kernel, &dker);
                    }
                    if influenced[bias.0] {
                        self.accumulate(bias, &dbias);
                    }
                }
                Op::BilinearResize { input } => {
                    let din = bilinear_backward(self.nodes[input.0].value.shape(), &grad);
                    self.accumulate(input, &din);
                }
                Op::Softmax2d { input } => {
                    let out = self.nodes[i].value.clone();
                    let din = softmax2d_backward(&out, &grad);
                    self.accumulate(input, &din);
                }
                Op::ChannelAvgPool { input, groups } => {
                    let ishape = self.nodes[input.0].value.shape().to_vec();
                    let c = ishape[0];
                    let hw = ishape[1] * ishape[2];
                    let block = c / groups;
                    let inv = 1.0 / block as f64;
                    let mut din = vec![0.0; c * hw];
                    for ch in 0..c {
                        let g = ch / block;
                        for k in 0..hw {
                            din[ch * hw + k] = grad.data()[g * hw + k] * inv;
                        }
                    }
                    let t = Tensor::new(ishape, din).unwrap();
                    self.accumulate(input, &t);
                }
                Op::ChannelSelect { input, indices } => {
                    let ishape = self.nodes[input.0].value.shape().to_vec();
                    let hw = ishape[1] * ishape[2];
                    let mut din = vec![0.0; ishape[0] * hw];
                    for (j, &ch) in indices.iter().enumerate() {
                        for k in 0..hw {
                            din[ch * hw + k] += grad.data()[j * hw + k];
                        }
                    }
                    let t = Tensor::new(ishape, din).unwrap();
                    self.accumulate(input, &t);
                }
                Op::ChannelAffine { input, gain, bias } => {
                    let x = self.nodes[input.0].value.clone();
                    let gd = self.nodes[gain.0].value.clone();
                    let c = x.shape()[0];
                    let hw = x.shape()[1] * x.shape()[2];
                    let mut din = vec![0.0; c * hw];
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    for ch in 0..c {
                        let g = gd.data()[ch];
                        for k in 0..hw {
                            let go = grad.data()[ch * hw + k];
                            din[ch * hw + k] = go * g;
                            dgain[ch] += go * x.data()[ch * hw + k];
                            dbias[ch] += go;
                        }
                    }
                    let din = Tensor::new(x.shape().to_vec(), din).unwrap();
                    let dgain = Tensor::new(vec![c], dgain).unwrap();
                    let dbias = Tensor::new(vec![c], dbias).unwrap();
                    self.accumulate(input, &din);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[input.0].value;
                    let din: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    let t = Tensor::new(x.shape().to_vec(), din).unwrap();
                    self.accumulate(input, &t);
                }
                Op::Sigmoid { input } => {
                    let s = &self.nodes[i].value;
                    let din: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(s.data())
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    let t = Tensor::new(s.shape().to_vec(), din).unwrap();
                    self.accumulate(input, &t);
                }
                Op::Abs { input } => {
                    let x = &self.nodes[input.0].value;
                    let din: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| {
                            if v > 0.0 {
                                g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let t = Tensor::new(x.shape().to_vec(), din).unwrap();
                    self.accumulate(input, &t);
                }
                Op::Clip01 { input } => {
                    let x = &self.nodes[input.0].value;
                    let din: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
                        .collect();
                    let t = Tensor::new(x.shape().to_vec(), din).unwrap();
                    self.accumulate(input, &t);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg = grad.map(|v| -v);
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    let da: Vec<f64> = grad.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    let db: Vec<f64> = grad.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    let da = Tensor::new(va.shape().to_vec(), da).unwrap();
                    let db = Tensor::new(vb.shape().to_vec(), db).unwrap();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { input, factor } => {
                    let din = grad.map(|v| v * factor);
                    self.accumulate(input, &din);
                }
                Op::Sum { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let din = Tensor::filled(shape, grad.scalar_value());
                    self.accumulate(input, &din);
                }
                Op::Mean { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let n = self.nodes[input.0].value.numel() as f64;
                    let din = Tensor::filled(shape, grad.scalar_value() / n);
                    self.accumulate(input, &din);
                }
                Op::NegCc { a, b } => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    let (da, db) = neg_cc_backward(&va, &vb, grad.scalar_value());
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::KlDiv { p, q, eps } => {
                    let vp = self.nodes[p.0].value.clone();
                    let vq = self.nodes[q.0].value.clone();
                    let (dp, dq) = kl_backward(&vp, &vq, eps, grad.scalar_value());
                    self.accumulate(p, &dp);
                    self.accumulate(q, &dq);
                }
            }
        }

        for counter in &self.participants {
            counter.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        let g = self.nodes[id.0].grad.as_mut().unwrap();
        debug_assert!(g.same_shape(delta));
        for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
    }
}

pub(crate) fn conv_out(extent: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = extent + 2 * padding;
    if padded < span {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel span {span} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let src = input.data();
    let ker = kernel.data();
    let mut out = vec![0.0; cout * oh * ow];

    for oc in 0..cout {
        let b = bias.data()[oc];
        out[oc * oh * ow..(oc + 1) * oh * ow].fill(b);
        for ic in 0..cin {
            let plane = &src[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = ker[((oc * cin + ic) * kh + ky) * kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let off_y = (ky * dilation) as isize - padding as isize;
                    let off_x = (kx * dilation) as isize - padding as isize;
                    let (lo_y, hi_y) = valid_range(off_y, stride, h, oh);
                    let (lo_x, hi_x) = valid_range(off_x, stride, w, ow);
                    for oy in lo_y..hi_y {
                        let iy = (oy * stride) as isize + off_y;
                        let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                        for ox in lo_x..hi_x {
                            let ix = ((ox * stride) as isize + off_x) as usize;
                            orow[ox] += wgt * irow[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

/// Output positions whose sampled input index `o*stride + off` lies in
/// [0, extent).
fn valid_range(off: isize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_i = extent as isize - 1 - off;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
    need_din: bool,
    need_dker: bool,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
    let src = input.data();
    let ker = kernel.data();
    let g = grad.data();

    let mut din = vec![0.0; if need_din { cin * h * w } else { 0 }];
    let mut dker = vec![0.0; if need_dker { ker.len() } else { 0 }];
    let mut dbias = vec![0.0; cout];

    for oc in 0..cout {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        dbias[oc] = gplane.iter().sum();
        for ic in 0..cin {
            let plane = &src[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((oc * cin + ic) * kh + ky) * kw + kx;
                    let wgt = ker[kidx];
                    let off_y = (ky * dilation) as isize - padding as isize;
                    let off_x = (kx * dilation) as isize - padding as isize;
                    let (lo_y, hi_y) = valid_range(off_y, stride, h, oh);
                    let (lo_x, hi_x) = valid_range(off_x, stride, w, ow);
                    match (need_din, need_dker) {
                        (true, true) => {
                            let dplane = &mut din[ic * h * w..(ic + 1) * h * w];
                            let mut wacc = 0.0;
                            for oy in lo_y..hi_y {
                                let iy = ((oy * stride) as isize + off_y) as usize;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in lo_x..hi_x {
                                    let ix = ((ox * stride) as isize + off_x) as usize;
                                    let gv = grow[ox];
                                    wacc += gv * plane[iy * w + ix];
                                    dplane[iy * w + ix] += gv * wgt;
                                }
                            }
                            dker[kidx] += wacc;
                        }
                        (true, false) => {
                            if wgt == 0.0 {
                                continue;
                            }
                            let dplane = &mut din[ic * h * w..(ic + 1) * h * w];
                            for oy in lo_y..hi_y {
                                let iy = ((oy * stride) as isize + off_y) as usize;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in lo_x..hi_x {
                                    let ix = ((ox * stride) as isize + off_x) as usize;
                                    dplane[iy * w + ix] += grow[ox] * wgt;
                                }
                            }
                        }
                        (false, true) => {
                            let mut wacc = 0.0;
                            for oy in lo_y..hi_y {
                                let iy = ((oy * stride) as isize + off_y) as usize;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in lo_x..hi_x {
                                    let ix = ((ox * stride) as isize + off_x) as usize;
                                    wacc += grow[ox] * plane[iy * w + ix];
                                }
                            }
                            dker[kidx] += wacc;
                        }
                        (false, false) => {}
                    }
                }
            }
        }
    }
    let din = if need_din {
        Tensor::new(vec![cin, h, w], din).unwrap()
    } else {
        Tensor::zeros(vec![cin, h, w])
    };
    let dker = if need_dker {
        Tensor::new(kernel.shape().to_vec(), dker).unwrap()
    } else {
        Tensor::zeros(kernel.shape().to_vec())
    };
    (din, dker, Tensor::new(vec![cout], dbias).unwrap())
}

fn bilinear_forward(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let src = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for oy in 0..oh {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let base = ch * h * w;
                let v = (1.0 - wy) * (1.0 - wx) * src[base + y0 * w + x0]
                    + (1.0 - wy) * wx * src[base + y0 * w + x1]
                    + wy * (1.0 - wx) * src[base + y1 * w + x0]
                    + wy * wx * src[base + y1 * w + x1];
                out[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

fn bilinear_backward(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let g = grad.data();
    let mut din = vec![0.0; c * h * w];
    for oy in 0..oh {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let base = ch * h * w;
                let gv = g[(ch * oh + oy) * ow + ox];
                din[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                din[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                din[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                din[base + y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    Tensor::new(vec![c, h, w], din).unwrap()
}

fn softmax2d_forward(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let hw = h * w;
    let src = input.data();
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let s = &src[ch * hw..(ch + 1) * hw];
        let d = &mut out[ch * hw..(ch + 1) * hw];
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in d.iter_mut().zip(s) {
            let e = (v - mx).exp();
            *o = e;
            z += e;
        }
        let inv = 1.0 / z;
        for o in d.iter_mut() {
            *o *= inv;
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

fn softmax2d_backward(out: &Tensor, grad: &Tensor) -> Tensor {
    let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    let hw = h * w;
    let s = out.data();
    let g = grad.data();
    let mut din = vec![0.0; c * hw];
    for ch in 0..c {
        let sl = &s[ch * hw..(ch + 1) * hw];
        let gl = &g[ch * hw..(ch + 1) * hw];
        let dot: f64 = sl.iter().zip(gl).map(|(&a, &b)| a * b).sum();
        for k in 0..hw {
            din[ch * hw + k] = sl[k] * (gl[k] - dot);
        }
    }
    Tensor::new(vec![c, h, w], din).unwrap()
}

/// Means, centered second moments and cross moment of two slices.
fn centered_moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut sab = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let da = x - ma;
        let db = y - mb;
        sa += da * da;
        sb += db * db;
        sab += da * db;
    }
    (ma, mb, sa, sb, sab)
}

fn neg_cc_backward(a: &Tensor, b: &Tensor, g: f64) -> (Tensor, Tensor) {
    let (ma, mb, sa, sb, sab) = centered_moments(a.data(), b.data());
    let denom = (sa * sb).sqrt();
    let r = sab / denom;
    let mut da = Vec::with_capacity(a.numel());
    let mut db = Vec::with_capacity(b.numel());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let cx = x - ma;
        let cy = y - mb;
        // d(-r)/dx = -(cy/denom - r*cx/sa)
        da.push(g * (r * cx / sa - cy / denom));
        db.push(g * (r * cy / sb - cx / denom));
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

/// Smoothed per-map normalization: v'_i = (v_i + eps) / sum_j (v_j + eps).
fn smooth_map(src: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let s: f64 = src.iter().map(|&v| v + eps).sum();
    (src.iter().map(|&v| (v + eps) / s).collect(), s)
}

fn kl_forward(p: &Tensor, q: &Tensor, eps: f64) -> f64 {
    let c = p.shape()[0];
    let hw = p.shape()[1] * p.shape()[2];
    let mut total = 0.0;
    for ch in 0..c {
        let (ps, _) = smooth_map(&p.data()[ch * hw..(ch + 1) * hw], eps);
        let (qs, _) = smooth_map(&q.data()[ch * hw..(ch + 1) * hw], eps);
        for (&pi, &qi) in ps.iter().zip(&qs) {
            if pi > 0.0 {
                total += pi * (pi / qi).ln();
            }
        }
    }
    total / c as f64
}

fn kl_backward(p: &Tensor, q: &Tensor, eps: f64, g: f64) -> (Tensor, Tensor) {
    let c = p.shape()[0];
    let hw = p.shape()[1] * p.shape()[2];
    let mut dp = vec![0.0; p.numel()];
    let mut dq = vec![0.0; q.numel()];
    for ch in 0..c {
        let off = ch * hw;
        let (ps, sp) = smooth_map(&p.data()[off..off + hw], eps);
        let (qs, sq) = smooth_map(&q.data()[off..off + hw], eps);
        let mut kl_map = 0.0;
        for (&pi, &qi) in ps.iter().zip(&qs) {
            if pi > 0.0 {
                kl_map += pi * (pi / qi).ln();
            }
        }
        for k in 0..hw {
            let (pi, qi) = (ps[k], qs[k]);
            let log_ratio = if pi > 0.0 { (pi / qi).ln() } else { 0.0 };
            dp[off + k] = g / (c as f64 * sp) * (log_ratio - kl_map);
            dq[off + k] = -g / (c as f64 * sq) * (pi / qi - 1.0);
        }
    }
    (
        Tensor::new(p.shape().to_vec(), dp).unwrap(),
        Tensor::new(q.shape().to_vec(), dq).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use crate::tensor::max_abs_diff;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Direct nested-loop convolution used as the independent oracle.
    fn conv_reference(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Tensor {
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
        let ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
        let mut out = Tensor::zeros(vec![cout, oh, ow]);
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += input.at3(ic, iy as usize, ix as usize)
                                        * kernel.data()[((oc * cin + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.set3(oc, oy, ox, acc);
                }
            }
        }
        out
    }

    /// Dilation-free direct convolution, for the bit-for-bit check.
    fn conv_reference_no_dilation(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![cout, oh, ow]);
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += input.at3(ic, iy as usize, ix as usize)
                                        * kernel.data()[((oc * cin + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.set3(oc, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 3]));
        let k = g.constant(Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f64).collect()).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, k, b, 1, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let xv = rand_tensor(&mut rng, vec![1, 4, 5], -1.0, 1.0);
        let x = g.constant(xv.clone());
        let k = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b, 1, 0, 1).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn conv_matches_reference_with_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, vec![2, 5, 5], -1.0, 1.0);
        let kernel = rand_tensor(&mut rng, vec![4, 2, 3, 3], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![4], -0.5, 0.5);

        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let k = g.constant(kernel.clone());
        let b = g.constant(bias.clone());
        let y = g.conv2d(x, k, b, 1, 1, 2).unwrap();

        let oracle = conv_reference(&input, &kernel, &bias, 1, 1, 2);
        assert_eq!(g.value(y).shape(), oracle.shape());
        assert!(max_abs_diff(g.value(y), &oracle) < 1e-12);
    }

    #[test]
    fn conv_dilation_one_is_bit_identical_to_plain_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding) in &[(1usize, 1usize), (2, 2), (1, 0)] {
            let input = rand_tensor(&mut rng, vec![3, 6, 7], -1.0, 1.0);
            let kernel = rand_tensor(&mut rng, vec![2, 3, 3, 3], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, vec![2], -0.5, 0.5);
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let k = g.constant(kernel.clone());
            let b = g.constant(bias.clone());
            let y = g.conv2d(x, k, b, stride, padding, 1).unwrap();
            let oracle = conv_reference_no_dilation(&input, &kernel, &bias, stride, padding);
            assert_eq!(g.value(y).data(), oracle.data());
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_the_dimension() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 4, 4]));
        let k = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let err = g.conv2d(x, k, b, 1, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "unhelpful error: {msg}");
    }

    #[test]
    fn bilinear_identity_resize_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, vec![2, 5, 7], 0.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = g.bilinear_resize(x, 5, 7).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn bilinear_interpolates_midpoints() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = g.bilinear_resize(x, 1, 3).unwrap();
        let got = g.value(y).data();
        assert!((got[0] - 0.0).abs() < 1e-15);
        assert!((got[1] - 0.5).abs() < 1e-15);
        assert!((got[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 3, 3], 0.37));
        let y = g.bilinear_resize(x, 8, 5).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_rejects_zero_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 3]));
        assert!(g.bilinear_resize(x, 0, 3).is_err());
    }

    #[test]
    fn softmax_uniform_on_constant_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 4, 5], 3.3));
        let y = g.softmax2d(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_two_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let y = g.softmax2d(x).unwrap();
        let got = g.value(y).data();
        assert!((got[0] - 0.25).abs() < 1e-12);
        assert!((got[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_unit_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![3, 4, 4], -2.0, 2.0);
        let shifted = x.map(|v| v + 17.25);
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let ya = g.softmax2d(a).unwrap();
        let yb = g.softmax2d(b).unwrap();
        assert!(max_abs_diff(g.value(ya), g.value(yb)) < 1e-12);
        let hw = 16;
        for ch in 0..3 {
            let s: f64 = g.value(ya).data()[ch * hw..(ch + 1) * hw].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_pool_identity_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, vec![2, 3, 3], 0.0, 1.0);
        let mut g = Graph::new();
        let id = g.constant(x.clone());
        let same = g.channel_avg_pool(id, 2).unwrap();
        assert_eq!(g.value(same), &x);

        let one = g.channel_avg_pool(id, 1).unwrap();
        for k in 0..9 {
            let want = (x.data()[k] + x.data()[9 + k]) / 2.0;
            assert!((g.value(one).data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![8, 2, 2], -1.0, 1.0);
        let mut g = Graph::new();
        let id = g.constant(x.clone());
        let y = g.channel_avg_pool(id, 4).unwrap();
        for grp in 0..4 {
            for k in 0..4 {
                let mean = (x.data()[(2 * grp) * 4 + k] + x.data()[(2 * grp + 1) * 4 + k]) / 2.0;
                assert!((g.value(y).data()[grp * 4 + k] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn channel_pool_rejects_non_divisible() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![6, 2, 2]));
        assert!(g.channel_avg_pool(x, 4).is_err());
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut g = Graph::new();
        let v = Tensor::new(vec![3], vec![0.2, 0.5, 0.9]).unwrap();
        let x = g.variable(v.clone());
        let y = g.constant(v);
        let d = g.sub(x, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(vec![2, 2]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn unused_nodes_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.variable(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_straight_through_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap());
        let c = g.clip01(x);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    /// Composite conv -> relu -> mean loss agrees with finite differences.
    #[test]
    fn composite_conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = rand_tensor(&mut rng, vec![2, 5, 5], 0.1, 0.9);
        let kernel = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.6, 0.6);
        let bias = rand_tensor(&mut rng, vec![3], -0.2, 0.2);

        let run = |x: &Tensor| -> f64 {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let k = g.constant(kernel.clone());
            let b = g.constant(bias.clone());
            let c = g.conv2d(xi, k, b, 1, 1, 1).unwrap();
            let r = g.relu(c);
            let m = g.mean(r);
            g.value(m).scalar_value()
        };

        let mut g = Graph::new();
        let xi = g.variable(input.clone());
        let k = g.constant(kernel.clone());
        let b = g.constant(bias.clone());
        let c = g.conv2d(xi, k, b, 1, 1, 1).unwrap();
        let r = g.relu(c);
        let m = g.mean(r);
        g.backward(m).unwrap();
        let analytic = g.grad(xi).unwrap();

        let fd = finite_diff_grad(run, &input, 1e-6);
        for (a, n) in analytic.data().iter().zip(fd.data()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < 1e-4,
                "conv composite grad mismatch: {a} vs {n}"
            );
        }
    }

    #[test]
    fn neg_cc_rejects_constant_input() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(vec![4], 0.5));
        let b = g.constant(Tensor::new(vec![4], vec![0.1, 0.4, 0.3, 0.2]).unwrap());
        assert!(g.neg_cc(a, b).is_err());
    }

    #[test]
    fn neg_cc_perfect_correlation_endpoints() {
        let v = Tensor::new(vec![4], vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let neg = v.map(|x| -x);
        let mut g = Graph::new();
        let a = g.constant(v.clone());
        let b = g.constant(v.clone());
        let c = g.constant(neg);
        let same = g.neg_cc(a, b).unwrap();
        let opp = g.neg_cc(a, c).unwrap();
        assert!((g.value(same).scalar_value() + 1.0).abs() < 1e-12);
        assert!((g.value(opp).scalar_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_and_gibbs() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let q = g.constant(Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap());
        let kl = g.kl_div(p, q, 0.0).unwrap();
        assert!((g.value(kl).scalar_value() - 2.0f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, vec![2, 3, 3], 0.01, 1.0);
            let b = rand_tensor(&mut rng, vec![2, 3, 3], 0.01, 1.0);
            let mut g = Graph::new();
            let p = g.constant(a);
            let q = g.constant(b);
            let kl = g.kl_div(p, q, 1e-8).unwrap();
            assert!(g.value(kl).scalar_value() >= -1e-12);
        }
    }

    #[test]
    fn kl_rejects_negative_entries() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 1, 2], vec![0.5, -0.1]).unwrap());
        let q = g.constant(Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap());
        assert!(g.kl_div(p, q, 1e-8).is_err());
    }

    /// Every differentiable op checked against central differences.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        type Build = Box<dyn Fn(&mut Graph, NodeId) -> NodeId>;
        let y_fixed = rand_tensor(&mut rng, vec![2, 4, 4], 0.05, 0.95);

        let cases: Vec<(&str, Build)> = vec![
            ("relu", Box::new(|g, x| { let r = g.relu(x); g.mean(r) })),
            ("sigmoid", Box::new(|g, x| { let r = g.sigmoid(x); g.mean(r) })),
            ("abs", Box::new(|g, x| { let r = g.abs(x); g.mean(r) })),
            ("scale", Box::new(|g, x| { let r = g.scale(x, -2.5); g.sum(r) })),
            ("softmax2d", Box::new(|g, x| {
                let s = g.softmax2d(x).unwrap();
                let sq = g.mul(s, s).unwrap();
                g.sum(sq)
            })),
            ("bilinear", Box::new(|g, x| {
                let r = g.bilinear_resize(x, 7, 3).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.mean(sq)
            })),
            ("channel_pool", Box::new(|g, x| {
                let r = g.channel_avg_pool(x, 1).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.sum(sq)
            })),
            ("channel_select", Box::new(|g, x| {
                let r = g.channel_select(x, vec![1, 1, 0]).unwrap();
                let sq = g.mul(r, r).unwrap();
                g.mean(sq)
            })),
        ];

        for (name, build) in &cases {
            // Keep relu/abs inputs away from their kinks.
            let x = rand_tensor(&mut rng, vec![2, 4, 4], 0.05, 0.95);
            let mut g = Graph::new();
            let xi = g.variable(x.clone());
            let loss = build(&mut g, xi);
            g.backward(loss).unwrap();
            let analytic = g.grad(xi).unwrap().clone();

            let fd = finite_diff_grad(
                |t| {
                    let mut g = Graph::new();
                    let xi = g.constant(t.clone());
                    let loss = build(&mut g, xi);
                    g.value(loss).scalar_value()
                },
                &x,
                1e-6,
            );
            for (a, n) in analytic.data().iter().zip(fd.data()) {
                let denom = a.abs().max(n.abs()).max(1e-8);
                assert!((a - n).abs() / denom < 1e-4, "{name}: {a} vs {n}");
            }
        }

        // Two-input ops.
        let x = rand_tensor(&mut rng, vec![2, 4, 4], 0.05, 0.95);
        let mut g = Graph::new();
        let xi = g.variable(x.clone());
        let yi = g.constant(y_fixed.clone());
        let d = g.sub(xi, yi).unwrap();
        let a = g.abs(d);
        let mae = g.mean(a);
        let ncc = g.neg_cc(xi, yi).unwrap();
        let kl = g.kl_div(xi, yi, 1e-6).unwrap();
        let t0 = g.add(mae, ncc).unwrap();
        let loss = g.add(t0, kl).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(xi).unwrap().clone();

        let fd = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let xi = g.constant(t.clone());
                let yi = g.constant(y_fixed.clone());
                let d = g.sub(xi, yi).unwrap();
                let a = g.abs(d);
                let mae = g.mean(a);
                let ncc = g.neg_cc(xi, yi).unwrap();
                let kl = g.kl_div(xi, yi, 1e-6).unwrap();
                let t0 = g.add(mae, ncc).unwrap();
                let loss = g.add(t0, kl).unwrap();
                g.value(loss).scalar_value()
            },
            &x,
            1e-6,
        );
        for (a, n) in analytic.data().iter().zip(fd.data()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < 1e-4, "mae+ncc+kl: {a} vs {n}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![2, 6, 6], 0.0, 1.0);
        let k = rand_tensor(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![3], -0.1, 0.1);
        let run = || {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let ki = g.constant(k.clone());
            let bi = g.constant(b.clone());
            let c = g.conv2d(xi, ki, bi, 2, 1, 1).unwrap();
            let s = g.sigmoid(c);
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}
