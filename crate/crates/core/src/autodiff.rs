//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends one
//! node that stores its output value and enough context to push gradients
//! back to its parents; [`Tape::backward`] walks the nodes once, newest
//! first. Broadcasting is limited to one-element tensors combined with
//! arbitrary tensors.

use std::collections::BTreeMap;

use crate::adacof::{self, AdaCofConfig};
use crate::error::{Error, Result};
use crate::nn::{self, BilinearTap, ConvCache};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Generic operations accepted by [`Tape::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Sum,
    Mean,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Pow(f64),
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
    Pad { axis: usize, before: usize, after: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Pow(_) => "pow",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Pad { .. } => "pad",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => 2,
            _ => 1,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Pad { x: Var, axis: usize, before: usize },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        cache: ConvCache,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Resize { x: Var, taps: Vec<BilinearTap> },
    Warp {
        src: Var,
        w: Var,
        alpha: Var,
        beta: Var,
        cfg: AdaCofConfig,
    },
    Blend { a: Var, b: Var, mask: Var },
    GridSample { img: Var, ys: Var, xs: Var },
    L2Norm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. any recorded value; zeros when it did not affect the loss.
    pub fn wrt(&self, var: Var, like: &Tensor) -> Tensor {
        self.grads
            .get(var.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name.
    pub fn into_params(mut self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let g = self.grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn broadcast_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (ad.len(), bd.len()) {
        (x, y) if x == y => ad.iter().zip(bd).map(|(&p, &q)| f(p, q)).collect(),
        (_, 1) => ad.iter().map(|&p| f(p, bd[0])).collect(),
        _ => bd.iter().map(|&q| f(ad[0], q)).collect(),
    };
    debug_assert_eq!(n, data.len());
    Tensor::from_parts(shape, data)
}

/// Reduce a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Vec<f64>, operand_len: usize) -> Vec<f64> {
    if g.len() == operand_len {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn block_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A named trainable leaf; its gradient is reported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let v = self.leaf(value, true)?;
        self.params.push((name.into(), v));
        Ok(v)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Apply a generic operation to `inputs`.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        if inputs.len() != kind.arity() {
            return Err(Error::invalid(
                name,
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        let a = inputs[0];
        let av = self.value(a);
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = inputs[1];
                let bv = self.value(b);
                let shape = broadcast_pair(name, av, bv)?;
                let (value, op) = match kind {
                    OpKind::Add => (zip_broadcast(av, bv, shape, |x, y| x + y), Op::Add(a, b)),
                    OpKind::Sub => (zip_broadcast(av, bv, shape, |x, y| x - y), Op::Sub(a, b)),
                    _ => (zip_broadcast(av, bv, shape, |x, y| x * y), Op::Mul(a, b)),
                };
                self.push(name, value, op, &[a, b])
            }
            OpKind::MatMul => {
                let b = inputs[1];
                let bv = self.value(b);
                let ([m, k], [k2, n]) = (av.shape(), bv.shape()) else {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                };
                let (m, k, k2, n) = (*m, *k, *k2, *n);
                if k != k2 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; m * n];
                nn::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
                self.push(name, Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
            }
            OpKind::Sum => {
                let v = Tensor::scalar(av.sum());
                self.push(name, v, Op::Sum(a), &[a])
            }
            OpKind::Mean => {
                let v = Tensor::scalar(av.sum() / av.numel() as f64);
                self.push(name, v, Op::Mean(a), &[a])
            }
            OpKind::Relu => {
                let v = av.map(|x| x.max(0.0));
                self.push(name, v, Op::Relu(a), &[a])
            }
            OpKind::Sigmoid => {
                let v = av.map(sigmoid);
                self.push(name, v, Op::Sigmoid(a), &[a])
            }
            OpKind::Tanh => {
                let v = av.map(f64::tanh);
                self.push(name, v, Op::Tanh(a), &[a])
            }
            OpKind::Exp => {
                let v = av.map(f64::exp);
                self.push(name, v, Op::Exp(a), &[a])
            }
            OpKind::Log => {
                let v = av.map(f64::ln);
                self.push(name, v, Op::Log(a), &[a])
            }
            OpKind::Pow(p) => {
                let v = av.map(|x| x.powf(p));
                self.push(name, v, Op::Pow(a, p), &[a])
            }
            OpKind::Slice { axis, start, end } => {
                if axis >= av.shape().len() || start >= end || end > av.shape()[axis] {
                    return Err(Error::invalid(
                        name,
                        format!("range {start}..{end} on axis {axis} invalid for {:?}", av.shape()),
                    ));
                }
                let (outer, len, inner) = block_dims(av.shape(), axis);
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    data.extend_from_slice(&av.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = av.shape().to_vec();
                shape[axis] = end - start;
                let v = Tensor::from_parts(shape, data);
                self.push(name, v, Op::Slice { x: a, axis, start }, &[a])
            }
            OpKind::Reshape(shape) => {
                let v = av.clone().reshape(shape)?;
                self.push(name, v, Op::Reshape(a), &[a])
            }
            OpKind::Pad { axis, before, after } => {
                if axis >= av.shape().len() {
                    return Err(Error::invalid(name, format!("axis {axis} out of range")));
                }
                let (outer, len, inner) = block_dims(av.shape(), axis);
                let new_len = len + before + after;
                let mut data = vec![0.0; outer * new_len * inner];
                for o in 0..outer {
                    let src = &av.data()[o * len * inner..(o + 1) * len * inner];
                    let dst = o * new_len * inner + before * inner;
                    data[dst..dst + len * inner].copy_from_slice(src);
                }
                let mut shape = av.shape().to_vec();
                shape[axis] = new_len;
                let v = Tensor::from_parts(shape, data);
                self.push(name, v, Op::Pad { x: a, axis, before }, &[a])
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Log, &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.forward_op(OpKind::Pow(p), &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.forward_op(OpKind::Slice { axis, start, end }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.forward_op(OpKind::Reshape(shape.into()), &[a])
    }

    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        self.forward_op(OpKind::Pad { axis, before, after }, &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_const", v, Op::AddConst(a), &[a])
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("mul_const", v, Op::MulConst(a, c), &[a])
    }

    /// Zero-padded 2-D convolution of a `[C,H,W]` input.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (value, cache) = nn::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                cache,
            },
            &parents,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = nn::upsample2x(self.value(x))?;
        self.push("upsample2x", v, Op::Upsample2x(x), &[x])
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let v = nn::avgpool2x(self.value(x))?;
        self.push("avgpool2x", v, Op::AvgPool2x(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = nn::concat_many(&tensors)?;
        self.push("concat_channels", v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let v = nn::channel_softmax(self.value(x))?;
        self.push("channel_softmax", v, Op::Softmax(x), &[x])
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (_, h, w) = xv.dims3()?;
        let v = nn::resize_bilinear(xv, out_h, out_w)?;
        let taps = nn::resize_taps(h, w, out_h, out_w);
        self.push("resize_bilinear", v, Op::Resize { x, taps }, &[x])
    }

    /// Deformable warp of `src` with per-pixel weights and offsets.
    pub fn adacof_warp(
        &mut self,
        src: Var,
        w: Var,
        alpha: Var,
        beta: Var,
        cfg: AdaCofConfig,
    ) -> Result<Var> {
        let (sv, wv, av, bv) = (self.value(src), self.value(w), self.value(alpha), self.value(beta));
        adacof::check_warp_inputs(sv, wv, av, bv, &cfg)?;
        let v = adacof::warp_forward(sv, wv, av, bv, &cfg);
        self.push(
            "adacof_warp",
            v,
            Op::Warp {
                src,
                w,
                alpha,
                beta,
                cfg,
            },
            &[src, w, alpha, beta],
        )
    }

    /// `mask * a + (1 - mask) * b`, mask `[1,H,W]` broadcast over channels.
    pub fn mask_blend(&mut self, a: Var, b: Var, mask: Var) -> Result<Var> {
        let (av, bv, mv) = (self.value(a), self.value(b), self.value(mask));
        adacof::check_blend(av, bv, mv)?;
        let v = adacof::blend_forward(av, bv, mv);
        self.push("mask_blend", v, Op::Blend { a, b, mask }, &[a, b, mask])
    }

    /// Bilinear samples of every channel of `img` at points `(ys[n], xs[n])`;
    /// the result is `[C, N]`.
    pub fn grid_sample(&mut self, img: Var, ys: Var, xs: Var) -> Result<Var> {
        let (iv, yv, xv) = (self.value(img), self.value(ys), self.value(xs));
        let (c, h, w) = iv.dims3()?;
        if yv.shape() != xv.shape() || yv.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "grid_sample",
                lhs: yv.shape().to_vec(),
                rhs: xv.shape().to_vec(),
            });
        }
        let n = yv.numel();
        let mut out = vec![0.0; c * n];
        for k in 0..n {
            let tap = nn::bilinear_tap(h, w, yv.data()[k], xv.data()[k]);
            for ch in 0..c {
                let plane = &iv.data()[ch * h * w..(ch + 1) * h * w];
                out[ch * n + k] = (0..4).map(|t| tap.wt[t] * plane[tap.idx[t]]).sum();
            }
        }
        let v = Tensor::from_parts(vec![c, n], out);
        self.push("grid_sample", v, Op::GridSample { img, ys, xs }, &[img, ys, xs])
    }

    /// Euclidean norm; the gradient at zero is taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push("l2_norm", Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (na, nb) = (val(*a).numel(), val(*b).numel());
                self.accumulate(grads, *b, unbroadcast(g.clone(), nb));
                self.accumulate(grads, *a, unbroadcast(g, na));
            }
            Op::Sub(a, b) => {
                let (na, nb) = (val(*a).numel(), val(*b).numel());
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, unbroadcast(neg, nb));
                self.accumulate(grads, *a, unbroadcast(g, na));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let pick = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                let ga: Vec<f64> = g.iter().enumerate().map(|(k, x)| x * pick(bv.data(), k)).collect();
                let gb: Vec<f64> = g.iter().enumerate().map(|(k, x)| x * pick(av.data(), k)).collect();
                self.accumulate(grads, *a, unbroadcast(ga, av.numel()));
                self.accumulate(grads, *b, unbroadcast(gb, bv.numel()));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![0.0; m * k];
                nn::gemm(m, n, k, &g, false, bv.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                nn::gemm(k, m, n, av.data(), true, &g, false, &mut gb, 0.0);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(a) => self.accumulate(grads, *a, vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let d = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Pow(a, p) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Slice { x, axis, start } => {
                let xv = val(*x);
                let (outer, len, inner) = block_dims(xv.shape(), *axis);
                let out_len = y.shape()[*axis];
                let mut d = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    d[dst..dst + out_len * inner]
                        .copy_from_slice(&g[o * out_len * inner..(o + 1) * out_len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Pad { x, axis, before } => {
                let xv = val(*x);
                let (outer, len, inner) = block_dims(xv.shape(), *axis);
                let new_len = y.shape()[*axis];
                let mut d = Vec::with_capacity(xv.numel());
                for o in 0..outer {
                    let src = o * new_len * inner + before * inner;
                    d.extend_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                cache,
            } => {
                let (dx, dw, db) =
                    nn::conv2d_backward(val(*x), val(*w), cache, *stride, *padding, &g);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = val(*x).dims3().expect("3-d");
                self.accumulate(grads, *x, nn::upsample2x_backward(&g, c, h, w));
            }
            Op::AvgPool2x(x) => {
                let (c, h, w) = val(*x).dims3().expect("3-d");
                self.accumulate(grads, *x, nn::avgpool2x_backward(&g, c, h, w));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    self.accumulate(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Softmax(x) => {
                let (c, h, w) = y.dims3().expect("3-d");
                self.accumulate(grads, *x, nn::channel_softmax_backward(y.data(), &g, c, h * w));
            }
            Op::Resize { x, taps } => {
                let (c, h, w) = val(*x).dims3().expect("3-d");
                let np = taps.len();
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (p, tap) in taps.iter().enumerate() {
                        let go = g[ch * np + p];
                        for t in 0..4 {
                            plane[tap.idx[t]] += go * tap.wt[t];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Warp {
                src,
                w,
                alpha,
                beta,
                cfg,
            } => {
                let wg = adacof::warp_backward(val(*src), val(*w), val(*alpha), val(*beta), cfg, &g);
                self.accumulate(grads, *src, wg.source);
                self.accumulate(grads, *w, wg.weights);
                self.accumulate(grads, *alpha, wg.alpha);
                self.accumulate(grads, *beta, wg.beta);
            }
            Op::Blend { a, b, mask } => {
                let (av, bv, mv) = (val(*a), val(*b), val(*mask));
                let hw = mv.numel();
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                let mut gm = vec![0.0; hw];
                for k in 0..g.len() {
                    let m = mv.data()[k % hw];
                    ga[k] = g[k] * m;
                    gb[k] = g[k] * (1.0 - m);
                    gm[k % hw] += g[k] * (av.data()[k] - bv.data()[k]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
                self.accumulate(grads, *mask, gm);
            }
            Op::GridSample { img, ys, xs } => {
                let iv = val(*img);
                let (c, h, w) = iv.dims3().expect("3-d");
                let (yv, xv) = (val(*ys), val(*xs));
                let n = yv.numel();
                let mut gi = vec![0.0; c * h * w];
                let mut gy = vec![0.0; n];
                let mut gx = vec![0.0; n];
                for k in 0..n {
                    let tap = nn::bilinear_tap(h, w, yv.data()[k], xv.data()[k]);
                    for ch in 0..c {
                        let go = g[ch * n + k];
                        let base = ch * h * w;
                        for t in 0..4 {
                            let v = iv.data()[base + tap.idx[t]];
                            gi[base + tap.idx[t]] += go * tap.wt[t];
                            gy[k] += go * tap.dwy[t] * v;
                            gx[k] += go * tap.dwx[t] * v;
                        }
                    }
                }
                self.accumulate(grads, *img, gi);
                self.accumulate(grads, *ys, gy);
                self.accumulate(grads, *xs, gx);
            }
            Op::L2Norm(x) => {
                let norm = y.data()[0];
                let d = if norm > 0.0 {
                    val(*x).data().iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; val(*x).numel()]
                };
                self.accumulate(grads, *x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(vec1(&[1.0, 2.0])).unwrap();
        let b = t.constant(vec1(&[3.0, 4.0])).unwrap();
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        let z = t.constant(Tensor::scalar(0.0)).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.value(sg).data(), &[0.5]);
        let ones = t.constant(Tensor::ones([2, 2])).unwrap();
        let m = t.mean(ones).unwrap();
        assert_eq!(t.value(m).data(), &[1.0]);
    }

    #[test]
    fn rejects_shape_mismatch_and_non_finite() {
        let mut t = Tape::new();
        let a = t.constant(vec1(&[1.0, 2.0])).unwrap();
        let b = t.constant(vec1(&[1.0, 2.0, 3.0])).unwrap();
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
        let neg = t.constant(vec1(&[-1.0])).unwrap();
        assert!(matches!(t.log(neg), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap().into_params(&t);
        assert_eq!(g["x"].data(), &[6.0]);
    }

    #[test]
    fn dot_gradient_and_unused_leaf() {
        let mut t = Tape::new();
        let x = t.param("x", vec1(&[1.0, 2.0])).unwrap();
        let y = t.param("y", vec1(&[3.0, 4.0])).unwrap();
        let _unused = t.param("unused", vec1(&[5.0])).unwrap();
        let p = t.mul(x, y).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap().into_params(&t);
        assert_eq!(g["x"].data(), &[3.0, 4.0]);
        assert_eq!(g["y"].data(), &[1.0, 2.0]);
        assert_eq!(g["unused"].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", vec1(&[1.0, 2.0])).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn scalar_broadcast_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", vec1(&[1.0, 2.0, 3.0])).unwrap();
        let s = t.param("s", Tensor::scalar(2.0)).unwrap();
        let p = t.mul(x, s).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap().into_params(&t);
        assert_eq!(g["s"].data(), &[6.0]);
        assert_eq!(g["x"].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_pad_roundtrip_shapes() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap()).unwrap();
        let s = t.slice(x, 1, 1, 3).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 4.0, 5.0]);
        let p = t.pad(s, 0, 1, 0).unwrap();
        assert_eq!(t.value(p).shape(), &[3, 2]);
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap().into_params(&t);
        assert_eq!(g["x"].data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
