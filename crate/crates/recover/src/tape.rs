//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Each forward op pushes a node holding its output tensor plus whatever the
//! backward pass needs. Gradients are accumulated per node in reverse order
//! from a scalar loss node. Tapes are single-use and cheap to rebuild per
//! sample, which is how batching works here: one tape per sample, gradients
//! reduced outside.

use crate::kernels::conv::{conv2d_bwd, conv2d_fwd, ConvMeta};
use crate::kernels::norm::{
    channel_norm_bwd, channel_norm_fwd, instance_norm_bwd, instance_norm_fwd, NormSaved,
};
use crate::kernels::resample::{
    avgpool2_bwd, avgpool2_fwd, resize_bilinear_bwd, resize_bilinear_fwd,
};
use crate::kernels::upsample::{convex_upsample_bwd, convex_upsample_fwd};
use crate::num::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, meta: ConvMeta, cols: Option<Tensor<T>> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScaled { a: NodeId, b: NodeId, k: T },
    MulMask { x: NodeId, mask: Tensor<T> },
    Scale { x: NodeId, k: T },
    AddScalar { x: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    HardSwish(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Neg(NodeId),
    Clamp { x: NodeId, lo: T, hi: T },
    Concat { xs: Vec<NodeId> },
    SliceC { x: NodeId, c0: usize, len: usize },
    BroadcastC { x: NodeId, copies: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, saved: NormSaved<T> },
    ChannelNorm { x: NodeId, gamma: NodeId, beta: NodeId, saved: NormSaved<T> },
    AvgPool2 { x: NodeId },
    ResizeBilinear { x: NodeId },
    Correlate { f1: NodeId, f2: NodeId },
    Lookup { levels: Vec<NodeId>, flow: Tensor<T>, radius: usize },
    ConvexUpsample { flow: NodeId, mask: NodeId, soft: Tensor<T>, scale: T },
    LogSumExp2 { a: NodeId, b: NodeId },
    MaskedMean { x: NodeId, weights: Tensor<T>, denom: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameters, or anything under test).
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input (frames, targets, detached values).
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, meta: ConvMeta) -> NodeId {
        let needs = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        let (y, cols) =
            conv2d_fwd(self.value(x), self.value(w), b.map(|b| self.value(b)), &meta, needs && meta.groups == 1);
        self.push(y, Op::Conv2d { x, w, b, meta, cols }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    /// `a + k * b`
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: T) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x + k * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::AddScaled { a, b, k }, needs)
    }

    /// Multiply by a per-pixel mask of shape `(h*w)`, broadcast over channels.
    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor<T>) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(mask.len(), h * w, "mask must be per-pixel");
        let mut v = self.value(x).clone();
        for ch in 0..c {
            let plane = v.plane_mut(ch);
            for (p, m) in plane.iter_mut().zip(mask.data()) {
                *p = *p * *m;
            }
        }
        let needs = self.ng(x);
        self.push(v, Op::MulMask { x, mask }, needs)
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v = self.value(x).map(|v| v * k);
        let needs = self.ng(x);
        self.push(v, Op::Scale { x, k }, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        let needs = self.ng(x);
        self.push(v, Op::AddScalar { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.ng(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let needs = self.ng(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        let needs = self.ng(x);
        self.push(v, Op::Tanh(x), needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let needs = self.ng(x);
        self.push(v, Op::Gelu(x), needs)
    }

    pub fn hard_swish(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(hard_swish);
        let needs = self.ng(x);
        self.push(v, Op::HardSwish(x), needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.abs());
        let needs = self.ng(x);
        self.push(v, Op::Abs(x), needs)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.exp());
        let needs = self.ng(x);
        self.push(v, Op::Exp(x), needs)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        let needs = self.ng(x);
        self.push(v, Op::Softplus(x), needs)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| -v);
        let needs = self.ng(x);
        self.push(v, Op::Neg(x), needs)
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(x).map(|v| v.min(hi).max(lo));
        let needs = self.ng(x);
        self.push(v, Op::Clamp { x, lo, hi }, needs)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (_, h, w) = self.value(xs[0]).dims3();
        let mut total = 0;
        for &x in xs {
            let (c, xh, xw) = self.value(x).dims3();
            assert_eq!((xh, xw), (h, w), "concat spatial mismatch");
            total += c;
        }
        let mut data = Vec::with_capacity(total * h * w);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let needs = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::from_vec(vec![total, h, w], data), Op::Concat { xs: xs.to_vec() }, needs)
    }

    pub fn slice_c(&mut self, x: NodeId, c0: usize, len: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert!(c0 + len <= c);
        let data = self.value(x).data()[c0 * h * w..(c0 + len) * h * w].to_vec();
        let needs = self.ng(x);
        self.push(Tensor::from_vec(vec![len, h, w], data), Op::SliceC { x, c0, len }, needs)
    }

    /// Replicate a single-channel map across `copies` channels.
    pub fn broadcast_c(&mut self, x: NodeId, copies: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(c, 1, "broadcast_c expects a single-channel input");
        let mut data = Vec::with_capacity(copies * h * w);
        for _ in 0..copies {
            data.extend_from_slice(self.value(x).data());
        }
        let needs = self.ng(x);
        self.push(Tensor::from_vec(vec![copies, h, w], data), Op::BroadcastC { x, copies }, needs)
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let (y, saved) = instance_norm_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::InstanceNorm { x, gamma, beta, saved }, needs)
    }

    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let (y, saved) = channel_norm_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::ChannelNorm { x, gamma, beta, saved }, needs)
    }

    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let y = avgpool2_fwd(self.value(x));
        let needs = self.ng(x);
        self.push(y, Op::AvgPool2 { x }, needs)
    }

    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let y = resize_bilinear_fwd(self.value(x), oh, ow);
        let needs = self.ng(x);
        self.push(y, Op::ResizeBilinear { x }, needs)
    }

    /// All-pairs correlation of two `(d, h, w)` feature maps, normalized by
    /// `1/sqrt(d)`; result shape `(h*w, h, w)`.
    pub fn correlate(&mut self, f1: NodeId, f2: NodeId) -> NodeId {
        let y = crate::costvolume::correlate_level0(self.value(f1), self.value(f2));
        let needs = self.ng(f1) || self.ng(f2);
        self.push(y, Op::Correlate { f1, f2 }, needs)
    }

    /// Sample the pyramid around `flow` (treated as a detached constant).
    pub fn lookup(&mut self, levels: &[NodeId], flow: Tensor<T>, radius: usize) -> NodeId {
        let level_tensors: Vec<&Tensor<T>> = levels.iter().map(|&l| self.value(l)).collect();
        let y = crate::costvolume::lookup_raw(&level_tensors, &flow, radius);
        let needs = levels.iter().any(|&l| self.ng(l));
        self.push(y, Op::Lookup { levels: levels.to_vec(), flow, radius }, needs)
    }

    pub fn convex_upsample(&mut self, flow: NodeId, mask: NodeId, scale: T) -> NodeId {
        let (y, soft) = convex_upsample_fwd(self.value(flow), self.value(mask), scale);
        let needs = self.ng(flow) || self.ng(mask);
        self.push(y, Op::ConvexUpsample { flow, mask, soft, scale }, needs)
    }

    /// Elementwise `log(exp(a) + exp(b))`, computed stably.
    pub fn log_sum_exp2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        });
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::LogSumExp2 { a, b }, needs)
    }

    /// `sum(x * weights) / denom` as a scalar node.
    pub fn masked_mean(&mut self, x: NodeId, weights: Tensor<T>, denom: T) -> NodeId {
        assert_eq!(self.value(x).len(), weights.len());
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            / denom;
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::MaskedMean { x, weights, denom }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let w = Tensor::full(vec![n], T::one());
        self.masked_mean(x, w, T::from_f64(n as f64))
    }

    /// Run reverse accumulation from a scalar `loss` node. Returns per-node
    /// gradients (None where no gradient flows).
    pub fn backward(&mut self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: NodeId, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { x, w, b, meta, cols } => {
                let (dx, dw, db) = conv2d_bwd(
                    self.value(*x),
                    self.value(*w),
                    meta,
                    cols.as_ref(),
                    dy,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || dy.clone());
                self.acc_if(grads, *b, || dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || dy.clone());
                self.acc_if(grads, *b, || dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc_if(grads, *a, || zip(dy, self.value(*b), |g, v| g * v));
                self.acc_if(grads, *b, || zip(dy, self.value(*a), |g, v| g * v));
            }
            Op::AddScaled { a, b, k } => {
                self.acc_if(grads, *a, || dy.clone());
                let k = *k;
                self.acc_if(grads, *b, || dy.map(|v| v * k));
            }
            Op::MulMask { x, mask } => {
                self.acc_if(grads, *x, || {
                    let (c, h, w) = dy.dims3();
                    let mut dx = dy.clone();
                    for ch in 0..c {
                        let plane = dx.plane_mut(ch);
                        for (p, m) in plane.iter_mut().zip(mask.data()) {
                            *p = *p * *m;
                        }
                    }
                    let _ = (h, w);
                    dx
                });
            }
            Op::Scale { x, k } => {
                let k = *k;
                self.acc_if(grads, *x, || dy.map(|v| v * k));
            }
            Op::AddScalar { x } => self.acc_if(grads, *x, || dy.clone()),
            Op::Relu(x) => {
                self.acc_if(grads, *x, || {
                    zip(dy, self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() })
                });
            }
            Op::Sigmoid(x) => {
                self.acc_if(grads, *x, || zip(dy, &node.value, |g, y| g * y * (T::one() - y)));
            }
            Op::Tanh(x) => {
                self.acc_if(grads, *x, || zip(dy, &node.value, |g, y| g * (T::one() - y * y)));
            }
            Op::Gelu(x) => {
                self.acc_if(grads, *x, || zip(dy, self.value(*x), |g, v| g * gelu_grad(v)));
            }
            Op::HardSwish(x) => {
                self.acc_if(grads, *x, || zip(dy, self.value(*x), |g, v| g * hard_swish_grad(v)));
            }
            Op::Abs(x) => {
                self.acc_if(grads, *x, || {
                    zip(dy, self.value(*x), |g, v| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::Exp(x) => {
                self.acc_if(grads, *x, || zip(dy, &node.value, |g, y| g * y));
            }
            Op::Softplus(x) => {
                self.acc_if(grads, *x, || zip(dy, self.value(*x), |g, v| g * sigmoid(v)));
            }
            Op::Neg(x) => self.acc_if(grads, *x, || dy.map(|v| -v)),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.acc_if(grads, *x, || {
                    zip(dy, self.value(*x), |g, v| if v > lo && v < hi { g } else { T::zero() })
                });
            }
            Op::Concat { xs } => {
                let (_, h, w) = node.value.dims3();
                let mut offset = 0;
                for &x in xs {
                    let (c, ..) = self.value(x).dims3();
                    if self.ng(x) {
                        let part = dy.data()[offset * h * w..(offset + c) * h * w].to_vec();
                        self.acc(grads, x, Tensor::from_vec(vec![c, h, w], part));
                    }
                    offset += c;
                }
            }
            Op::SliceC { x, c0, len } => {
                self.acc_if(grads, *x, || {
                    let (c, h, w) = self.value(*x).dims3();
                    let mut dx = Tensor::zeros(vec![c, h, w]);
                    dx.data_mut()[c0 * h * w..(c0 + len) * h * w].copy_from_slice(dy.data());
                    dx
                });
            }
            Op::BroadcastC { x, copies } => {
                self.acc_if(grads, *x, || {
                    let (_, h, w) = dy.dims3();
                    let mut dx = Tensor::zeros(vec![1, h, w]);
                    for ch in 0..*copies {
                        let src = &dy.data()[ch * h * w..(ch + 1) * h * w];
                        for (d, &s) in dx.data_mut().iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    dx
                });
            }
            Op::InstanceNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = instance_norm_bwd(dy, self.value(*gamma), saved);
                self.acc_if(grads, *x, || dx.clone());
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::ChannelNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = channel_norm_bwd(dy, self.value(*gamma), saved);
                self.acc_if(grads, *x, || dx.clone());
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::AvgPool2 { x } => {
                self.acc_if(grads, *x, || avgpool2_bwd(dy, self.value(*x).dims3()));
            }
            Op::ResizeBilinear { x } => {
                self.acc_if(grads, *x, || resize_bilinear_bwd(dy, self.value(*x).dims3()));
            }
            Op::Correlate { f1, f2 } => {
                let (df1, df2) =
                    crate::costvolume::correlate_bwd(self.value(*f1), self.value(*f2), dy);
                self.acc_if(grads, *f1, || df1.clone());
                self.acc_if(grads, *f2, || df2.clone());
            }
            Op::Lookup { levels, flow, radius } => {
                let level_tensors: Vec<&Tensor<T>> =
                    levels.iter().map(|&l| self.value(l)).collect();
                let dlevels = crate::costvolume::lookup_bwd(&level_tensors, flow, *radius, dy);
                for (&lid, dl) in levels.iter().zip(dlevels) {
                    if self.ng(lid) {
                        self.acc(grads, lid, dl);
                    }
                }
            }
            Op::ConvexUpsample { flow, mask, soft, scale } => {
                let (dflow, dmask) = convex_upsample_bwd(self.value(*flow), soft, dy, *scale);
                self.acc_if(grads, *flow, || dflow.clone());
                self.acc_if(grads, *mask, || dmask.clone());
            }
            Op::LogSumExp2 { a, b } => {
                let g = dy;
                let av = self.value(*a);
                let bv = self.value(*b);
                let y = &node.value;
                self.acc_if(grads, *a, || {
                    let mut out = av.clone();
                    for i in 0..out.len() {
                        out.data_mut()[i] = g.data()[i] * (av.data()[i] - y.data()[i]).exp();
                    }
                    out
                });
                self.acc_if(grads, *b, || {
                    let mut out = bv.clone();
                    for i in 0..out.len() {
                        out.data_mut()[i] = g.data()[i] * (bv.data()[i] - y.data()[i]).exp();
                    }
                    out
                });
            }
            Op::MaskedMean { x, weights, denom } => {
                let g = dy.item() / *denom;
                self.acc_if(grads, *x, || {
                    Tensor::from_vec(
                        self.value(*x).shape().to_vec(),
                        weights.data().iter().map(|&w| w * g).collect(),
                    )
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, make: impl FnOnce() -> Tensor<T>) {
        if self.ng(id) {
            self.acc(grads, id, make());
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + gelu_inner(x).tanh())
}

#[inline]
fn gelu_inner<T: Scalar>(x: T) -> T {
    T::from_f64(0.7978845608028654) * (x + T::from_f64(0.044715) * x * x * x)
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let t = gelu_inner(x).tanh();
    let dinner = T::from_f64(0.7978845608028654)
        * (T::one() + T::from_f64(3.0 * 0.044715) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
fn hard_swish<T: Scalar>(x: T) -> T {
    let three = T::from_f64(3.0);
    let six = T::from_f64(6.0);
    x * (x + three).max(T::zero()).min(six) / six
}

#[inline]
fn hard_swish_grad<T: Scalar>(x: T) -> T {
    let three = T::from_f64(3.0);
    if x <= -three {
        T::zero()
    } else if x >= three {
        T::one()
    } else {
        (x + x + three) / T::from_f64(6.0)
    }
}
