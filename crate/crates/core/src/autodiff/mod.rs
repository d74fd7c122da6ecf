//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its value
//! and a record of its inputs, so node ids are already in topological order.
//! A fresh graph is built for every forward pass. Gradients can either be
//! accumulated into the nodes ([`Graph::backward`]) or returned for selected
//! nodes without touching stored gradients ([`Graph::gradients`]), which is how
//! Grad-CAM reads `d(objective)/d(feature)` in the middle of a training step.
//!
//! Broadcasting is limited to one rule: a `C x 1 x 1` right-hand operand
//! against a `C x H x W` left-hand operand.

pub(crate) mod conv;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::ConvGeometry;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    PerChannel { channels: usize, plane: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, f64),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln { x: Var, floor: f64 },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    GlobalAvgPool(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, geo: ConvGeometry },
    Upsample { x: Var, factor: usize },
    Concat(Vec<Var>),
    Tile { x: Var, reps: usize },
    Reshape(Var),
    L2Normalize { x: Var, eps: f64 },
    Dot(Var, Var),
    BinLogLikelihood(BinLogLikelihood),
}

/// Saved state of [`Graph::bin_log_likelihood`].
#[derive(Debug, Clone)]
struct BinLogLikelihood {
    x: Var,
    centers: Vec<f64>,
    tau: f64,
    floor: f64,
    weights: Tensor,
    /// `(pixel, probabilities)` for every pixel with a nonzero weight.
    probs: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// The computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    match (a, b) {
        (&[c, h, w], &[c2, 1, 1]) if c == c2 => Ok(Broadcast::PerChannel { channels: c, plane: h * w }),
        _ => Err(Error::ShapeIncompatible(a.to_vec(), b.to_vec())),
    }
}

/// Index of element `i` of the left operand in the (possibly broadcast) right operand.
#[inline]
fn rhs_index(bc: Broadcast, i: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::PerChannel { plane, .. } => i / plane,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Outer/axis/inner extents for iterating along `axis` of `shape`.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Bilinear sampling table for one axis (align-corners false): for each output
/// coordinate the two source taps and the weight of the second one.
fn bilinear_taps(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..size * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(size - 1);
            let hi = (lo + 1).min(size - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Identity node that always requires a gradient, so [`Graph::gradients`]
    /// can reach it even when everything upstream is constant (frozen teacher).
    pub fn watch(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Reshape(x) });
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

    /// Gradient accumulated by [`Graph::backward`], if any reached this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(Var, Var, Broadcast) -> Op) -> Result<Var> {
        let bc = broadcast(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[rhs_index(bc, i)])).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op(a, b, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + offset);
        self.push(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, libm::fabs, Op::Abs(x))
    }

    /// `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn ln(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| libm::log(v.max(floor)), Op::Ln { x, floor })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument("softmax axis out of range".into()));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = libm::exp(src[idx(k)] - max);
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Sums out `axis`, dropping it from the shape (a rank-1 input yields `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument("sum axis out of range".into()));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    /// `C x H x W -> C x 1 x 1` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(x).rank() != 3 {
            return Err(Error::ShapeIncompatible(self.shape(x).to_vec(), vec![c, h, w]));
        }
        let t = self.value(x);
        let data = (0..c).map(|ch| t.channel(ch).iter().sum::<f64>() / (h * w) as f64).collect();
        let value = Tensor::new(&[c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Cross-correlation of a `C x H x W` input with an `O x C x Kh x Kw` kernel plus per-output bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding, dilation)?;
        if self.shape(bias) != [geo.out_channels] {
            return Err(Error::ShapeIncompatible(self.shape(bias).to_vec(), vec![geo.out_channels]));
        }
        let data = conv::forward(&geo, self.value(input).data(), self.value(kernel).data(), self.value(bias).data());
        let value = Tensor::new(&[geo.out_channels, geo.out_h, geo.out_w], data)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geo }, &[input, kernel, bias]))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::ShapeIncompatible(t.shape().to_vec(), vec![0, 0, 0]));
        }
        let (c, h, w) = t.chw()?;
        let (ys, xs) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[oy * ow + ox] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::InvalidArgument("empty concat".into()))?).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeIncompatible(first, s.to_vec()));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let t = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(reps);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Tile { x, reps }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x / (||x||_2 + eps)` over all elements, keeping the shape.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let norm = libm::sqrt(t.data().iter().map(|v| v * v).sum::<f64>());
        let value = t.map(|v| v / (norm + eps));
        self.push(value, Op::L2Normalize { x, eps }, &[x])
    }

    /// Inner product of two equally shaped tensors, shape `[1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeIncompatible(self.shape(a).to_vec(), self.shape(b).to_vec()));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// `sum_p sum_i w_i(p) ln max(P_i(p), floor)` where, for each element `x(p)`
    /// of `x`, `P(p) = softmax_i(-|x(p) - c_i| / tau)`. `weights` is `B x shape(x)`.
    /// Same value and gradient as building `tile`, `sub`, `abs`, `affine`,
    /// `softmax`, `ln` and `dot` by hand, without materializing the `B`-fold
    /// intermediates; pixels whose weights are all zero are skipped.
    pub fn bin_log_likelihood(&mut self, x: Var, centers: &[f64], tau: f64, floor: f64, weights: Tensor) -> Result<Var> {
        let n = self.value(x).len();
        let b = centers.len();
        if b == 0 || weights.len() != b * n {
            return Err(Error::ShapeIncompatible(self.shape(x).to_vec(), weights.shape().to_vec()));
        }
        let xv = self.value(x).data();
        let w = weights.data();
        let mut total = 0.0;
        let mut probs = Vec::new();
        let mut z = vec![0.0; b];
        for p in 0..n {
            if (0..b).all(|i| w[i * n + p] == 0.0) {
                continue;
            }
            for (zi, &c) in z.iter_mut().zip(centers) {
                *zi = -libm::fabs(xv[p] - c) * (1.0 / tau);
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|&v| libm::exp(v - m)).collect();
            let sum: f64 = e.iter().sum();
            let pr: Vec<f64> = e.iter().map(|v| v / sum).collect();
            let lse = m + libm::log(sum);
            let ln_floor = libm::log(floor);
            for (i, &pi) in pr.iter().enumerate() {
                let ln_p = if pi > floor { z[i] - lse } else { ln_floor };
                total += ln_p * w[i * n + p];
            }
            probs.push((p, pr));
        }
        let op = BinLogLikelihood { x, centers: centers.to_vec(), tau, floor, weights, probs };
        Ok(self.push(Tensor::scalar(total), Op::BinLogLikelihood(op), &[x]))
    }

    /// Accumulates `d(out)/d(node)` into every gradient-requiring node reachable
    /// backwards from the scalar `out`. Repeated calls add up.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let grads = self.propagate(out, 0)?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// `d(out)/d(v)` for each `v` in `wrt`, leaving stored gradients untouched.
    /// Nodes that do not influence `out` get a zero gradient.
    pub fn gradients(&self, out: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let stop = wrt.iter().map(|v| v.0).min().unwrap_or(out.0);
        let mut grads = self.propagate(out, stop)?;
        Ok(wrt
            .iter()
            .map(|v| grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(*v))))
            .collect())
    }

    fn propagate(&self, out: Var, stop: usize) -> Result<Vec<Option<Tensor>>> {
        let shape = self.shape(out);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarBackward(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[out.0].requires_grad {
            return Ok(grads);
        }
        grads[out.0] = Some(Tensor::full(shape, 1.0));
        for id in (stop..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.node_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Adds `contribution(i)` into the gradient buffer of `v`, if `v` needs one.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        for (i, a) in slot.data_mut().iter_mut().enumerate() {
            *a += contribution(i);
        }
    }

    fn buffer<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v))).data_mut())
    }

    /// Reduces a full-size gradient onto the (possibly broadcast) right operand.
    fn accumulate_rhs(&self, grads: &mut [Option<Tensor>], b: Var, bc: Broadcast, full: impl Fn(usize) -> f64, len: usize) {
        match bc {
            Broadcast::Same => self.accumulate(grads, b, full),
            Broadcast::PerChannel { channels, plane } => {
                let reduced: Vec<f64> = (0..channels).map(|c| (c * plane..(c + 1) * plane).map(&full).sum()).collect();
                debug_assert_eq!(channels * plane, len);
                self.accumulate(grads, b, |i| reduced[i]);
            }
        }
    }

    fn node_backward(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b, bc) => {
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate_rhs(grads, b, bc, |i| gd[i], gd.len());
            }
            &Op::Sub(a, b, bc) => {
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate_rhs(grads, b, bc, |i| -gd[i], gd.len());
            }
            &Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |i| gd[i] * bv[rhs_index(bc, i)]);
                self.accumulate_rhs(grads, b, bc, |i| gd[i] * av[i], gd.len());
            }
            &Op::Affine(x, s) => self.accumulate(grads, x, |i| s * gd[i]),
            &Op::Abs(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |i| {
                    if xv[i] > 0.0 {
                        gd[i]
                    } else if xv[i] < 0.0 {
                        -gd[i]
                    } else {
                        0.0
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |i| if xv[i] > 0.0 { gd[i] } else { 0.0 });
            }
            &Op::Sigmoid(x) => self.accumulate(grads, x, |i| gd[i] * y[i] * (1.0 - y[i])),
            &Op::Softplus(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |i| gd[i] * sigmoid(xv[i]));
            }
            &Op::Ln { x, floor } => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |i| if xv[i] > floor { gd[i] / xv[i] } else { 0.0 });
            }
            &Op::Softmax { x, axis } => {
                let Some(buf) = self.buffer(grads, x) else { return };
                let (outer, n, inner) = axis_extents(node.value.shape(), axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dotp: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            buf[idx(k)] += y[idx(k)] * (gd[idx(k)] - dotp);
                        }
                    }
                }
            }
            &Op::Sum(x) => self.accumulate(grads, x, |_| gd[0]),
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                self.accumulate(grads, x, |_| gd[0] / n);
            }
            &Op::SumAxis { x, axis } => {
                let (_, n, inner) = axis_extents(self.shape(x), axis);
                self.accumulate(grads, x, |i| gd[(i / inner / n) * inner + i % inner]);
            }
            &Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(x).chw().expect("validated in forward");
                let plane = h * w;
                self.accumulate(grads, x, |i| gd[i / plane] / plane as f64);
            }
            &Op::Conv2d { input, kernel, bias, geo } => {
                let (iv, kv) = (self.value(input).data(), self.value(kernel).data());
                // Split borrows: the three buffers belong to distinct nodes.
                let mut gi = self.nodes[input.0].requires_grad.then(|| grads[input.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(input))));
                let mut gk = self.nodes[kernel.0].requires_grad.then(|| grads[kernel.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(kernel))));
                let mut gb = self.nodes[bias.0].requires_grad.then(|| grads[bias.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(bias))));
                conv::backward(
                    &geo,
                    iv,
                    kv,
                    gd,
                    gi.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(input, gi), (kernel, gk), (bias, gb)] {
                    if t.is_some() {
                        grads[v.0] = t;
                    }
                }
            }
            &Op::Upsample { x, factor } => {
                let Some(buf) = self.buffer(grads, x) else { return };
                let (c, h, w) = self.value(x).chw().expect("validated in forward");
                let (ys, xs) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
                let (oh, ow) = (h * factor, w * factor);
                for ch in 0..c {
                    let src = &gd[ch * oh * ow..(ch + 1) * oh * ow];
                    let dst = &mut buf[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |i| gd[offset + i]);
                    offset += n;
                }
            }
            &Op::Tile { x, reps } => {
                let n = self.value(x).len();
                self.accumulate(grads, x, |i| (0..reps).map(|r| gd[r * n + i]).sum());
            }
            &Op::Reshape(x) => self.accumulate(grads, x, |i| gd[i]),
            &Op::L2Normalize { x, eps } => {
                let xv = self.value(x).data();
                let norm = libm::sqrt(xv.iter().map(|v| v * v).sum::<f64>());
                let denom = norm + eps;
                if norm > 0.0 {
                    let xg: f64 = xv.iter().zip(gd).map(|(a, b)| a * b).sum();
                    let k = xg / (norm * denom * denom);
                    self.accumulate(grads, x, |i| gd[i] / denom - xv[i] * k);
                } else {
                    self.accumulate(grads, x, |i| gd[i] / denom);
                }
            }
            &Op::Dot(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |i| gd[0] * bv[i]);
                self.accumulate(grads, b, |i| gd[0] * av[i]);
            }
            Op::BinLogLikelihood(op) => {
                let xv = self.value(op.x).data();
                let n = xv.len();
                let w = op.weights.data();
                let Some(buf) = self.buffer(grads, op.x) else { return };
                for (p, pr) in &op.probs {
                    let p = *p;
                    // d/dP_i of w_i ln max(P_i, floor) is w_i / P_i above the floor.
                    let a: Vec<f64> = pr
                        .iter()
                        .enumerate()
                        .map(|(i, &pi)| if pi > op.floor { gd[0] * w[i * n + p] / pi } else { 0.0 })
                        .collect();
                    let dotp: f64 = a.iter().zip(pr).map(|(ai, pi)| ai * pi).sum();
                    let mut acc = 0.0;
                    for (i, &c) in op.centers.iter().enumerate() {
                        let gz = pr[i] * (a[i] - dotp) * (1.0 / op.tau);
                        let dev = xv[p] - c;
                        if dev > 0.0 {
                            acc -= gz;
                        } else if dev < 0.0 {
                            acc += gz;
                        }
                    }
                    buf[p] += acc;
                }
            }
        }
    }
}
