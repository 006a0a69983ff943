//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the list in exact reverse order, so the recorded order is always a
//! valid topological order. Gradients of leaves that require them accumulate
//! across `backward` calls until `zero_grads`.
//!
//! Binary elementwise ops broadcast only over leading axes: the shorter
//! operand's shape must be a suffix of the longer one's.

use crate::einsum::{contract, ContractSpec};
use crate::error::{AutodiffError, Result};
use crate::tensor::{axis_extents, inverse_permutation, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    Softmax {
        src: usize,
        axis: usize,
    },
    Contract {
        a: usize,
        b: usize,
        spec: ContractSpec,
    },
    Affine {
        a: usize,
        b: usize,
        bias: usize,
        spec: ContractSpec,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
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

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a trainable leaf, or zeros when it was disconnected.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| c * x);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), fast_tanh);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Tanh(a.0), rg)
    }

    /// Absolute value; the backward pass uses the subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::abs);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Abs(a.0), rg)
    }

    // ------------------------------------------------------------------
    // reductions and shape ops

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permuted(axes)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Permute(a.0, axes.to_vec()), rg))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(AutodiffError::Axis { axis, rank: v.rank() });
        }
        if start + len > v.shape()[axis] {
            return Err(AutodiffError::Shape(format!(
                "slice {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                v.shape()[axis]
            )));
        }
        let (outer, extent, inner) = axis_extents(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Slice { src: a.0, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Shape("concat of zero tensors".into()))?;
        let rank = self.value(*first).rank();
        if axis >= rank {
            return Err(AutodiffError::Axis { axis, rank });
        }
        let mut shape = self.value(*first).shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(self.value(*first).shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::Shape(format!(
                    "concat along axis {axis}: incompatible shape {s:?}"
                )));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat { srcs: ids, axis }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(AutodiffError::Axis { axis, rank: v.rank() });
        }
        let (outer, extent, inner) = axis_extents(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * extent * inner + k * inner + i;
                let max = (0..extent).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..extent {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Softmax { src: a.0, axis }, rg))
    }

    /// Einstein-summation contraction, e.g. `"bmzh,bmh->bmz"`.
    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let spec = ContractSpec::parse(spec)?;
        self.contract_with(a, b, spec)
    }

    pub fn contract_with(&mut self, a: Var, b: Var, spec: ContractSpec) -> Result<Var> {
        let out = contract(&spec, self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Contract { a: a.0, b: b.0, spec }, rg))
    }

    /// `contract(a, b) + bias` as one node; `bias` broadcasts over the
    /// leading output axes. Saves storing the intermediate product.
    pub fn affine(&mut self, a: Var, b: Var, bias: Var, spec: &str) -> Result<Var> {
        let spec = ContractSpec::parse(spec)?;
        let mut out = contract(&spec, self.value(a), self.value(b))?;
        let bv = self.value(bias);
        if !is_suffix(bv.shape(), out.shape()) {
            return Err(AutodiffError::Shape(format!(
                "bias shape {:?} is not a suffix of the product shape {:?}",
                bv.shape(),
                out.shape()
            )));
        }
        let n = bv.numel();
        if n > 0 {
            for chunk in out.data_mut().chunks_exact_mut(n) {
                chunk.iter_mut().zip(bv.data()).for_each(|(o, x)| *o += x);
            }
        }
        let rg = self.rg(&[a.0, b.0, bias.0]);
        Ok(self.push(
            out,
            Op::Affine {
                a: a.0,
                b: b.0,
                bias: bias.0,
                spec,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // backward

    /// Accumulates d`loss`/d`leaf` into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                Op::Add(a, b) => {
                    let gb = reduce_to(&g, self.nodes[b].value.shape());
                    self.send(&mut grads, b, gb);
                    let ga = if self.nodes[a].value.shape() == g.shape() {
                        g
                    } else {
                        reduce_to(&g, self.nodes[a].value.shape())
                    };
                    self.send(&mut grads, a, ga);
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, a, reduce_to(&g, self.nodes[a].value.shape()));
                    let gb = map(&reduce_to(&g, self.nodes[b].value.shape()), |x| -x);
                    self.send(&mut grads, b, gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].requires_grad {
                        let ga = broadcast_binary(&g, vb, |x, y| x * y)?;
                        let ga = reduce_to(&ga, va.shape());
                        self.send(&mut grads, a, ga);
                    }
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[b].requires_grad {
                        let gb = broadcast_binary(&g, va, |x, y| x * y)?;
                        let gb = reduce_to(&gb, vb.shape());
                        self.send(&mut grads, b, gb);
                    }
                }
                Op::Scale(a, c) => self.send(&mut grads, a, map(&g, |x| c * x)),
                Op::Relu(a) => {
                    let ga = zip(&g, &self.nodes[a].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
                    self.send(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip(&g, &self.nodes[i].value, |gi, y| gi * (1.0 - y * y));
                    self.send(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let ga = zip(&g, &self.nodes[a].value, |gi, x| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    self.send(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.nodes[a].value.shape(), g.data()[0]);
                    self.send(&mut grads, a, ga);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.numel() as f64;
                    let ga = Tensor::full(self.nodes[a].value.shape(), g.data()[0] / n);
                    self.send(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    let ga = g.reshaped(self.nodes[a].value.shape())?;
                    self.send(&mut grads, a, ga);
                }
                Op::Permute(a, axes) => {
                    let ga = g.permuted(&inverse_permutation(&axes))?;
                    self.send(&mut grads, a, ga);
                }
                Op::Slice { src, axis, start } => {
                    let full = self.nodes[src].value.shape().to_vec();
                    let len = g.shape()[axis];
                    let (outer, extent, inner) = axis_extents(&full, axis);
                    let mut ga = Tensor::zeros(&full);
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        let srco = o * len * inner;
                        ga.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[srco..srco + len * inner]);
                    }
                    self.send(&mut grads, src, ga);
                }
                Op::Concat { srcs, axis } => {
                    let (outer, _, inner) = axis_extents(g.shape(), axis);
                    let total = g.shape()[axis];
                    let mut offset = 0;
                    for s in srcs {
                        let shape = self.nodes[s].value.shape().to_vec();
                        let len = shape[axis];
                        let mut gs = Vec::with_capacity(shape.iter().product());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gs.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        offset += len;
                        self.send(&mut grads, s, Tensor::new(shape, gs)?);
                    }
                }
                Op::Softmax { src, axis } => {
                    let y = &self.nodes[i].value;
                    let (outer, extent, inner) = axis_extents(y.shape(), axis);
                    let mut ga = vec![0.0; y.numel()];
                    for o in 0..outer {
                        for n in 0..inner {
                            let at = |k: usize| o * extent * inner + k * inner + n;
                            let dot: f64 = (0..extent).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                            for k in 0..extent {
                                ga[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                            }
                        }
                    }
                    let ga = Tensor::new(y.shape().to_vec(), ga)?;
                    self.send(&mut grads, src, ga);
                }
                Op::Contract { a, b, spec } => {
                    if self.nodes[a].requires_grad {
                        let ga = contract(&spec.grad_a(), &g, &self.nodes[b].value)?;
                        self.send(&mut grads, a, ga);
                    }
                    if self.nodes[b].requires_grad {
                        let gb = contract(&spec.grad_b(), &g, &self.nodes[a].value)?;
                        self.send(&mut grads, b, gb);
                    }
                }
                Op::Affine { a, b, bias, spec } => {
                    if self.nodes[bias].requires_grad {
                        let gbias = reduce_to(&g, self.nodes[bias].value.shape());
                        self.send(&mut grads, bias, gbias);
                    }
                    if self.nodes[a].requires_grad {
                        let ga = contract(&spec.grad_a(), &g, &self.nodes[b].value)?;
                        self.send(&mut grads, a, ga);
                    }
                    if self.nodes[b].requires_grad {
                        let gb = contract(&spec.grad_b(), &g, &self.nodes[a].value)?;
                        self.send(&mut grads, b, gb);
                    }
                }
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor>], target: usize, g: Tensor) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// `tanh` through a single `exp`; libm's `tanh` is used near zero where the
/// subtraction would cost relative precision. Absolute error stays within
/// a few machine epsilons.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        x.tanh()
    } else {
        1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip(a, b, f));
    }
    if is_suffix(b.shape(), a.shape()) {
        let n = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        if n > 0 {
            for chunk in a.data().chunks_exact(n) {
                data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
            }
        }
        return Tensor::new(a.shape().to_vec(), data);
    }
    if is_suffix(a.shape(), b.shape()) {
        let n = a.numel();
        let mut data = Vec::with_capacity(b.numel());
        if n > 0 {
            for chunk in b.data().chunks_exact(n) {
                data.extend(a.data().iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        return Tensor::new(b.shape().to_vec(), data);
    }
    Err(AutodiffError::Shape(format!(
        "incompatible shapes {:?} and {:?} (only leading-axis broadcasting is supported)",
        a.shape(),
        b.shape()
    )))
}

/// Sums a broadcast gradient back down to `shape` (a suffix of `g`'s shape).
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n > 0 {
        for chunk in g.data().chunks_exact(n) {
            out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}
