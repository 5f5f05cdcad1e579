//! Tape-based reverse-mode differentiation over a fixed set of primitives.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! topologically sorted by construction. Leaves are either named parameters
//! (which receive gradients) or constants (which never do). `backward` walks
//! the tape once in reverse and returns gradients for parameters only.

pub mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

/// Named parameter tensors, iterated in name order.
pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

/// Gradient of a scalar loss with respect to each named parameter.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    Linear { weight: NodeId, input: NodeId, bias: Option<NodeId> },
    Relu(NodeId),
    MaxPool { input: NodeId, argmax: Vec<usize> },
    GlobalAvgPool(NodeId),
    Upsample2x(NodeId),
    Softplus(NodeId),
    Scale(NodeId, T),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    L2Normalize { input: NodeId, norm: T },
    SoftmaxCrossEntropy { logits: NodeId, target: usize, probs: Vec<T> },
    MaskedL1 { pred: NodeId, target: NodeId, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        let id = self.push(value.clone(), Op::Leaf, true);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers `value` as a parameter when `trainable`, else as a constant.
    pub fn leaf(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> NodeId {
        if trainable {
            self.param(name, value)
        } else {
            self.constant(value.clone())
        }
    }

    /// `input [c_in,h,w]`, `kernel [c_out,c_in,kh,kw]`, optional `bias [c_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::dim(format!("conv2d expects [c,h,w] and [o,c,kh,kw], got {xs:?} and {ks:?}")));
        }
        if xs[0] != ks[1] {
            return Err(Error::dim(format!("conv2d input has {} channels, kernel expects {}", xs[0], ks[1])));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        if ks[2] > xs[1] + 2 * pad || ks[3] > xs[2] + 2 * pad {
            return Err(Error::dim(format!("conv2d kernel {ks:?} larger than padded input {xs:?} (pad {pad})")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim(format!("conv2d bias {:?} vs {} output channels", self.shape(b), ks[0])));
            }
        }
        let geom = ConvGeom { c_in: xs[0], h: xs[1], w: xs[2], c_out: ks[0], kh: ks[2], kw: ks[3], stride, pad };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    /// `weight [out,in] * input [in] + bias [out]`.
    pub fn linear(&mut self, weight: NodeId, input: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(input).to_vec();
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::dim(format!("linear weight {ws:?} incompatible with input {xs:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!("linear bias {:?} vs {} outputs", self.shape(b), ws[0])));
            }
        }
        let mut out = match bias {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![T::zero(); ws[0]],
        };
        T::gemm(
            ws[0],
            ws[1],
            1,
            T::one(),
            self.value(weight).data(),
            ws[1] as isize,
            1,
            self.value(input).data(),
            1,
            1,
            T::one(),
            &mut out,
            1,
            1,
        );
        let rg = self.needs(weight) || self.needs(input) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new([ws[0]], out)?, Op::Linear { weight, input, bias }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.needs(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 || stride == 0 || size > s[1] || size > s[2] {
            return Err(Error::dim(format!("max_pool {size}x{size}/{stride} on {s:?}")));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), s[0], s[1], s[2], size, stride);
        let shape = [s[0], (s[1] - size) / stride + 1, (s[2] - size) / stride + 1];
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { input: x, argmax }, rg))
    }

    /// `[c,h,w] -> [c]`
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("global_avg_pool expects [c,h,w], got {s:?}")));
        }
        let hw = s[1] * s[2];
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> =
            self.value(x).data().chunks(hw).map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new([s[0]], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Bilinear 2x upsampling of `[c,h,w]`, half-pixel centers, clamped edges.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("upsample2x expects [c,h,w], got {s:?}")));
        }
        let out = kernels::upsample2x_forward(self.value(x).data(), s[0], s[1], s[2]);
        let rg = self.needs(x);
        Ok(self.push(Tensor::new([s[0], 2 * s[1], 2 * s[2]], out)?, Op::Upsample2x(x), rg))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(kernels::softplus);
        let rg = self.needs(x);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, alpha: T) -> NodeId {
        let v = self.value(x).map(|a| a * alpha);
        let rg = self.needs(x);
        self.push(v, Op::Scale(x, alpha), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "dot")?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `x / ||x||_2`; a zero vector has no direction and is rejected.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let norm = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::DegenerateProjection);
        }
        let v = self.value(x).map(|a| a / norm);
        let rg = self.needs(x);
        Ok(self.push(v, Op::L2Normalize { input: x, norm }, rg))
    }

    /// `logsumexp(logits) - logits[target]`, max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 1 || target >= z.len() {
            return Err(Error::dim(format!("softmax_cross_entropy target {target} on logits {:?}", z.shape())));
        }
        let zmax = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.data().iter().map(|&v| (v - zmax).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &e| a + e);
        let loss = total.ln() + zmax - z.data()[target];
        let probs = exps.into_iter().map(|e| e / total).collect();
        let rg = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, target, probs }, rg))
    }

    /// `sum(mask * |pred - target|) / sum(mask)`.
    pub fn masked_l1(&mut self, pred: NodeId, target: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.same_shape(pred, target, "masked_l1")?;
        if mask.len() != self.value(pred).len() {
            return Err(Error::dim(format!("masked_l1 mask has {} entries for {:?}", mask.len(), self.shape(pred))));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateSample("depth mask has no valid pixel".into()));
        }
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let total = mask
            .iter()
            .zip(p.iter().zip(y))
            .filter(|(&m, _)| m)
            .fold(T::zero(), |acc, (_, (&a, &b))| acc + (a - b).abs());
        let loss = total / T::of(count as f64);
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::MaskedL1 { pred, target, mask: mask.to_vec(), count }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of parameters registered
    /// under the same name are summed.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = GradMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |id: NodeId, contrib: Vec<T>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        match out.get_mut(name) {
                            Some(acc) => acc.axpy(T::one(), &t)?,
                            None => {
                                out.insert(name.clone(), t);
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernel, bias, geom } => {
                    let cg = kernels::conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        &g,
                        self.needs(*input),
                        self.needs(*kernel),
                        bias.is_some_and(|b| self.needs(b)),
                    );
                    if let Some(dx) = cg.input {
                        send(*input, dx);
                    }
                    if let Some(dk) = cg.kernel {
                        send(*kernel, dk);
                    }
                    if let (Some(b), Some(db)) = (bias, cg.bias) {
                        send(*b, db);
                    }
                }
                Op::Linear { weight, input, bias } => {
                    let ws = self.shape(*weight);
                    let (o, n) = (ws[0], ws[1]);
                    if self.needs(*weight) {
                        let x = self.value(*input).data();
                        let mut dw = vec![T::zero(); o * n];
                        for (row, &gi) in dw.chunks_mut(n).zip(&g) {
                            row.iter_mut().zip(x).for_each(|(d, &xv)| *d = gi * xv);
                        }
                        send(*weight, dw);
                    }
                    if self.needs(*input) {
                        let mut dx = vec![T::zero(); n];
                        T::gemm(
                            n,
                            o,
                            1,
                            T::one(),
                            self.value(*weight).data(),
                            1,
                            n as isize,
                            &g,
                            1,
                            1,
                            T::zero(),
                            &mut dx,
                            1,
                            1,
                        );
                        send(*input, dx);
                    }
                    if let Some(b) = bias {
                        send(*b, g.clone());
                    }
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                        .collect();
                    send(*x, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*input).len()];
                    for (&idx, &gi) in argmax.iter().zip(&g) {
                        dx[idx] += gi;
                    }
                    send(*input, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let hw = s[1] * s[2];
                    let inv = T::of(1.0 / hw as f64);
                    let dx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, hw)).collect();
                    send(*x, dx);
                }
                Op::Upsample2x(x) => {
                    let s = self.shape(*x);
                    send(*x, kernels::upsample2x_backward(&g, s[0], s[1], s[2]));
                }
                Op::Softplus(x) => {
                    let dx = self.value(*x).data().iter().zip(&g).map(|(&v, &gi)| gi * kernels::sigmoid(v)).collect();
                    send(*x, dx);
                }
                Op::Scale(x, alpha) => {
                    send(*x, g.iter().map(|&gi| gi * *alpha).collect());
                }
                Op::Reshape(x) => send(*x, g),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    send(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                    send(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    send(*a, self.value(*b).data().iter().map(|&y| g0 * y).collect());
                    send(*b, self.value(*a).data().iter().map(|&x| g0 * x).collect());
                }
                Op::Sum(x) => {
                    send(*x, vec![g[0]; self.value(*x).len()]);
                }
                Op::L2Normalize { input, norm } => {
                    let y = node.value.data();
                    let yg = y.iter().zip(&g).fold(T::zero(), |a, (&yv, &gi)| a + yv * gi);
                    let dx = y.iter().zip(&g).map(|(&yv, &gi)| (gi - yv * yg) / *norm).collect();
                    send(*input, dx);
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    let g0 = g[0];
                    let mut dz: Vec<T> = probs.iter().map(|&p| g0 * p).collect();
                    dz[*target] -= g0;
                    send(*logits, dz);
                }
                Op::MaskedL1 { pred, target, mask, count } => {
                    let scale = g[0] / T::of(*count as f64);
                    let p = self.value(*pred).data();
                    let y = self.value(*target).data();
                    let dp: Vec<T> = mask
                        .iter()
                        .zip(p.iter().zip(y))
                        .map(|(&m, (&a, &b))| if m { scale * sign(a - b) } else { T::zero() })
                        .collect();
                    if self.needs(*target) {
                        send(*target, dp.iter().map(|&d| -d).collect());
                    }
                    send(*pred, dp);
                }
            }
        }
        Ok(out)
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_conv_returns_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 1.0).collect();
        let x = g.constant(t(&[1, 3, 3], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn zero_sum_kernel_on_constant_field_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 6, 6], 0.7));
        let sobel_x = t(&[1, 1, 3, 3], &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]);
        let k = g.constant(sobel_x);
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn sobel_x_on_column_ramp_is_eight() {
        // Brute force: each output row of Sobel-x over I(r,c)=c sums
        // (1+2+1) * ((c+1) - (c-1)) = 8.
        let ramp: Vec<f64> = (0..25).map(|i| (i % 5) as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 5, 5], &ramp));
        let k = g.constant(t(&[1, 1, 3, 3], &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), [1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 4, 4]));
        let k = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_and_linear_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let w = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros([3]));
        let v = g.constant(t(&[3], &[0.3, -2.0, 5.0]));
        let y = g.linear(w, v, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.shape(y), [1, 1, 1]);
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_negative() {
        let mut g = Graph::new();
        let x = g.param("x", &t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn chain_rule_on_squared_product() {
        let mut g = Graph::new();
        let w = g.param("w", &t(&[1], &[3.0]));
        let x = g.constant(t(&[1], &[2.0]));
        let wx = g.mul(w, x).unwrap();
        let sq = g.mul(wx, wx).unwrap();
        let loss = g.sum(sq);
        assert_eq!(g.value(loss).item(), 36.0);
        assert_eq!(g.backward(loss).unwrap()["w"].data(), &[24.0]);
    }

    #[test]
    fn backward_on_vector_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param("x", &t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient_and_graph_resets() {
        let mut g = Graph::new();
        let a = g.param("a", &t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let d = g.dot(a, c).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a"].data(), &[3.0, 4.0]);
        g.reset();
        assert!(g.is_empty());
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut g = Graph::new();
        let a1 = g.param("a", &t(&[1], &[2.0]));
        let a2 = g.param("a", &t(&[1], &[2.0]));
        let p = g.mul(a1, a2).unwrap();
        let s = g.sum(p);
        assert_eq!(g.backward(s).unwrap()["a"].data(), &[4.0]);
    }

    #[test]
    fn l2_normalize_rejects_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.param("z", &Tensor::zeros([4]));
        assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateProjection)));
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::full([4], 0.25));
        let l = g.softmax_cross_entropy(z, 0).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_l1_requires_a_valid_pixel() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", &Tensor::zeros([2]));
        let y = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.masked_l1(p, y, &[false, false]), Err(Error::DegenerateSample(_))));
    }
}
