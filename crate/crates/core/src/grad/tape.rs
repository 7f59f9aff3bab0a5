//! Tape-based reverse-mode differentiation over the operator set the refiner,
//! discriminator and downstream predictor need.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; backward walks it in reverse exactly once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::grad::kernels::{self, ConvGeom};
use crate::params::NetParams;
use crate::tensor::{Scalar, Tensor};

/// Probabilities entering a `log` are clamped into this band.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Tanh,
    Add,
    MaxPool,
    AvgChannel,
    GlobalAvgPool,
    Derivatives,
    SelectChannel,
    L1Diff,
    SquaredDiff,
    Softmax2,
    Log,
    Sum,
    Affine,
    Linear,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    AvgChannel(NodeId),
    GlobalAvgPool(NodeId),
    Derivatives(NodeId),
    SelectChannel {
        input: NodeId,
        channel: usize,
    },
    L1Diff(NodeId, NodeId),
    SquaredDiff(NodeId, NodeId),
    Softmax2(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Affine {
        input: NodeId,
        scale: f64,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Add(..) => OpKind::Add,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::AvgChannel(_) => OpKind::AvgChannel,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Derivatives(_) => OpKind::Derivatives,
            Op::SelectChannel { .. } => OpKind::SelectChannel,
            Op::L1Diff(..) => OpKind::L1Diff,
            Op::SquaredDiff(..) => OpKind::SquaredDiff,
            Op::Softmax2(_) => OpKind::Softmax2,
            Op::Log(_) => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::Affine { .. } => OpKind::Affine,
            Op::Linear { .. } => OpKind::Linear,
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Leaf nodes created from a [`NetParams`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    /// Copies the tape gradients onto the parameter tensors.
    pub fn store_grads<T: Scalar>(&self, tape: &Tape<T>, params: &mut NetParams<T>) -> Result<()> {
        if params.len() != self.ids.len() {
            return Err(Error::invalid("parameter set does not match binding"));
        }
        for (&id, (_, t)) in self.ids.iter().zip(params.iter_mut()) {
            let g = tape
                .grad(id)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    /// Hash of the branch every non-smooth op took: ReLU and L1 signs,
    /// max-pool winners and which log inputs were clamped. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let signs = |t: &Tensor<T>, h: &mut DefaultHasher| {
            for v in t.data() {
                (v.to_f64() > 0.0).hash(h);
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => signs(self.value(*x), &mut h),
                Op::L1Diff(a, b) => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        (x.to_f64() > y.to_f64()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::Log(x) => {
                    for v in self.value(*x).data() {
                        let v = v.to_f64();
                        (v < PROB_FLOOR, v > 1.0 - PROB_FLOOR).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    pub fn bind(&mut self, params: &NetParams<T>) -> Bound {
        let ids = params.iter().map(|(_, t)| self.param(t.clone())).collect();
        Bound { ids }
    }

    /// Binds parameters as constants, e.g. a network frozen for this update.
    pub fn bind_frozen(&mut self, params: &NetParams<T>) -> Bound {
        let ids = params.iter().map(|(_, t)| self.constant(t.clone())).collect();
        Bound { ids }
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if xs[2] + 2 * pad < kh || xs[3] + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input smaller than kernel)",
                left: xs,
                right: ws,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh,
            kw,
            stride,
            pad,
            oh: (xs[2] + 2 * pad - kh) / stride + 1,
            ow: (xs[3] + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.needs(&[input, weight]) || bias.is_some_and(|b| self.needs(&[b]));
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    /// NaN passes through unchanged.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        #[allow(clippy::eq_op)]
        self.map(x, |a| if a > T::zero() || a != a { a } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, |a| T::from_f64(a.to_f64().tanh()), Op::Tanh(x))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.map(
            x,
            |a| T::from_f64(scale * a.to_f64() + shift),
            Op::Affine { input: x, scale },
        )
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    /// Clamped natural log; entries outside `[PROB_FLOOR, 1 − PROB_FLOOR]`
    /// are clamped and pass no gradient.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.map(
            x,
            |a| T::from_f64(a.to_f64().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()),
            Op::Log(x),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn maxpool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < kernel || s[3] < kernel || kernel == 0 || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool",
                left: s,
                right: vec![kernel, kernel],
            });
        }
        let (shape, out, argmax) = kernels::maxpool_forward(&s, self.value(x).data(), kernel, stride);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { input: x, argmax }, rg))
    }

    fn nchw(&self, x: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    /// Mean over the channel axis: `N×C×H×W → N×1×H×W`.
    pub fn avg_channel(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "avg_channel")?;
        let xs = self.value(x).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * hw);
        for i in 0..n {
            for p in 0..hw {
                let s: f64 = (0..c).map(|ch| xs[(i * c + ch) * hw + p].to_f64()).sum();
                out.push(T::from_f64(s / c as f64));
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, 1, h, w], out)?, Op::AvgChannel(x), rg))
    }

    /// Spatial mean: `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "global_avg_pool")?;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() / (h * w) as f64))
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Forward differences along x and y with a replicated boundary (the last
    /// column/row difference is zero). Channel `2c` holds ∂x of input channel
    /// `c`, channel `2c+1` holds ∂y.
    pub fn derivatives(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "derivatives")?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * 2 * c * h * w];
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let (i, ch) = (plane / c, plane % c);
            let dx_base = ((i * 2 * c) + 2 * ch) * h * w;
            let dy_base = dx_base + h * w;
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx].to_f64();
                    if xx + 1 < w {
                        out[dx_base + y * w + xx] = T::from_f64(src[y * w + xx + 1].to_f64() - v);
                    }
                    if y + 1 < h {
                        out[dy_base + y * w + xx] = T::from_f64(src[(y + 1) * w + xx].to_f64() - v);
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, 2 * c, h, w], out)?, Op::Derivatives(x), rg))
    }

    /// Softmax across a 2-channel axis at every spatial position.
    pub fn softmax2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "softmax2")?;
        if c != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax2 (needs 2 channels)",
                left: self.shape(x).to_vec(),
                right: vec![n, 2, h, w],
            });
        }
        let xs = self.value(x).data();
        let hw = h * w;
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            let base = i * 2 * hw;
            for p in 0..hw {
                let a = xs[base + p].to_f64();
                let b = xs[base + hw + p].to_f64();
                // logistic form: p0 = 1 / (1 + e^(b-a)), exact complement for p1
                let p0 = 1.0 / (1.0 + (b - a).exp());
                let p1 = 1.0 / (1.0 + (a - b).exp());
                out[base + p] = T::from_f64(p0);
                out[base + hw + p] = T::from_f64(p1);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::Softmax2(x), rg))
    }

    /// `N×C×H×W → N×1×H×W`, keeping one channel.
    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.nchw(x, "select_channel")?;
        if channel >= c {
            return Err(Error::invalid(format!("channel {channel} out of range for {c}")));
        }
        let xs = self.value(x).data();
        let hw = h * w;
        let out = (0..n)
            .flat_map(|i| xs[(i * c + channel) * hw..(i * c + channel + 1) * hw].iter().copied())
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, 1, h, w], out)?,
            Op::SelectChannel { input: x, channel },
            rg,
        ))
    }

    fn pairwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(x.to_f64() - y.to_f64()))
            .sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), op, rg))
    }

    /// `Σ |a − b|` over all entries.
    pub fn l1_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pairwise(a, b, "l1_diff", f64::abs, Op::L1Diff(a, b))
    }

    /// `Σ (a − b)²` over all entries.
    pub fn squared_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pairwise(a, b, "squared_diff", |d| d * d, Op::SquaredDiff(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    /// Fully connected layer. `x` is `N×…` (trailing axes flattened), `weight`
    /// is `M×K`, `bias` is `M`; output is `N×M`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let n = xs[0];
        let k: usize = xs[1..].iter().product();
        if ws.len() != 2 || ws[1] != k || xs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        let m = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: ws,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let out = kernels::linear_forward(
            n,
            k,
            m,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.needs(&[x, weight]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar node. Gradients are kept for leaves only.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::from_f64(1.0)]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = T::from_f64(a.to_f64() + c.to_f64());
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let r = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    need,
                );
                if let Some(v) = r.input {
                    self.accumulate(grads, *input, v);
                }
                if let Some(v) = r.weight {
                    self.accumulate(grads, *weight, v);
                }
                if let (Some(b), Some(v)) = (bias, r.bias) {
                    self.accumulate(grads, *b, v);
                }
            }
            Op::Relu(x) => {
                // subgradient at exactly 0 is 0
                let gx = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| if y > T::zero() { gy } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| {
                        let y = y.to_f64();
                        T::from_f64(gy.to_f64() * (1.0 - y * y))
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Affine { input, scale, .. } => {
                let gx = g.iter().map(|&v| T::from_f64(v.to_f64() * scale)).collect();
                self.accumulate(grads, *input, gx);
            }
            Op::Log(x) => {
                let xs = self.value(*x).data();
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&p, &gy)| {
                        let p = p.to_f64();
                        if (PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p) {
                            T::from_f64(gy.to_f64() / p)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gy) in argmax.iter().zip(g) {
                    let s = src as usize;
                    gx[s] = T::from_f64(gx[s].to_f64() + gy.to_f64());
                }
                self.accumulate(grads, *input, gx);
            }
            Op::AvgChannel(x) => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (i, chunk) in gx.chunks_mut(c * hw).enumerate() {
                    for ch in 0..c {
                        for p in 0..hw {
                            chunk[ch * hw + p] = T::from_f64(g[i * hw + p].to_f64() / c as f64);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let gx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(T::from_f64(v.to_f64() / hw as f64), hw))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Derivatives(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[1], s[2], s[3]);
                let mut gx = vec![0.0f64; self.value(*x).numel()];
                for plane in 0..s[0] * c {
                    let (i, ch) = (plane / c, plane % c);
                    let dx_base = ((i * 2 * c) + 2 * ch) * h * w;
                    let dy_base = dx_base + h * w;
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            if xx + 1 < w {
                                let gv = g[dx_base + y * w + xx].to_f64();
                                dst[y * w + xx + 1] += gv;
                                dst[y * w + xx] -= gv;
                            }
                            if y + 1 < h {
                                let gv = g[dy_base + y * w + xx].to_f64();
                                dst[(y + 1) * w + xx] += gv;
                                dst[y * w + xx] -= gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx.into_iter().map(T::from_f64).collect());
            }
            Op::SelectChannel { input, channel } => {
                let s = self.shape(*input);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gx = vec![T::zero(); self.value(*input).numel()];
                for i in 0..s[0] {
                    gx[(i * c + channel) * hw..(i * c + channel + 1) * hw]
                        .copy_from_slice(&g[i * hw..(i + 1) * hw]);
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Softmax2(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut gx = vec![T::zero(); out.len()];
                for i in 0..s[0] {
                    let base = i * 2 * hw;
                    for p in 0..hw {
                        let (y0, y1) = (out[base + p].to_f64(), out[base + hw + p].to_f64());
                        let (g0, g1) = (g[base + p].to_f64(), g[base + hw + p].to_f64());
                        let dot = g0 * y0 + g1 * y1;
                        gx[base + p] = T::from_f64(y0 * (g0 - dot));
                        gx[base + hw + p] = T::from_f64(y1 * (g1 - dot));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L1Diff(a, b) | Op::SquaredDiff(a, b) => {
                let scale = g[0].to_f64();
                let l1 = matches!(node.op, Op::L1Diff(..));
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| {
                        let diff = x.to_f64() - y.to_f64();
                        if l1 {
                            // sign(0) = 0
                            scale * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 }
                        } else {
                            scale * 2.0 * diff
                        }
                    })
                    .collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.iter().map(|&v| T::from_f64(-v)).collect());
                }
                self.accumulate(grads, *a, d.into_iter().map(T::from_f64).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let n = xs[0];
                let k: usize = xs[1..].iter().product();
                let m = self.shape(*weight)[0];
                let need = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let r = kernels::linear_backward(
                    n,
                    k,
                    m,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    need,
                );
                if let Some(v) = r.input {
                    self.accumulate(grads, *input, v);
                }
                if let Some(v) = r.weight {
                    self.accumulate(grads, *weight, v);
                }
                if let (Some(b), Some(v)) = (bias, r.bias) {
                    self.accumulate(grads, *b, v);
                }
            }
        }
    }
}
