//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] owns every value computed in one forward pass. Primitives
//! append a node and return a [`Var`] handle; [`Tape::backward`] walks the
//! nodes in exact reverse recording order and accumulates `d root / d node`
//! into every node that requires grad.
//!
//! A node requires grad when any of its inputs does. Nodes that do not are
//! still recorded (their values are needed downstream) but are skipped by
//! the backward sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::resample::ResamplePlan;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    AvgPool2d { x: Var, kernel: usize, stride: usize },
    Reshape(Var),
    Log(Var),
    Exp(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2Norm(Var),
    RowL2Norm(Var),
    Softmax { x: Var, tau: f64 },
    LogSoftmax { x: Var, tau: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Resample { x: Var, plan: Arc<ResamplePlan> },
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::Empty("mean"));
        }
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Mean(x)))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| mismatch("sum_last", &shape, &[1]))?;
        let data: Vec<f64> = self.value(x).data().chunks(k.max(1)).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SumLast(x)))
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).l2_norm());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::L2Norm(x))
    }

    /// Euclidean norm of each slice along the leading axis: `(n, ..) -> (n)`.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| mismatch("row_l2_norm", &shape, &[1]))?;
        let inner = numel(&shape[1..]);
        let data: Vec<f64> = (0..rows)
            .map(|r| self.value(x).data()[r * inner..(r + 1) * inner].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(data), rg, Op::RowL2Norm(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// `(n, ..) -> (n, prod(..))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(mismatch("flatten", &shape, &[1]));
        }
        self.reshape(x, &[shape[0], numel(&shape[1..])])
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `x (batch, in)`, `w (out, in)`, `b (out)` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(mismatch("linear", self.shape(b), &[fout]));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; batch * fout];
        for i in 0..batch {
            let xr = &xd[i * fin..(i + 1) * fin];
            for j in 0..fout {
                let wr = &wd[j * fin..(j + 1) * fin];
                out[i * fout + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(vec![batch, fout], out)?, rg, Op::Linear { x, w, b }))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    /// `x (n, c, h, w)`, `w (o, c, kh, kw)`, `b (o)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || spec.stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d", self.shape(b), &[sw[0]]));
            }
        }
        let geo = ConvGeometry::new(&sx, &sw, spec).ok_or_else(|| mismatch("conv2d", &sx, &sw))?;
        let mut out = vec![0.0; geo.n * geo.o * geo.oh * geo.ow];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (plane, chunk) in out.chunks_mut(geo.oh * geo.ow).enumerate() {
                chunk.fill(bd[plane % geo.o]);
            }
        }
        geo.forward(self.value(x).data(), self.value(w).data(), &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![geo.n, geo.o, geo.oh, geo.ow], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, spec }))
    }

    /// Max pooling on `(n, c, h, w)` without padding. Ties resolve to the
    /// first maximal element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (oh, ow) = pool_dims(&s, kernel, stride).ok_or_else(|| mismatch("maxpool2d", &s, &[kernel, stride]))?;
        let (h, w) = (s[2], s[3]);
        let xd = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, rg, Op::MaxPool2d { x, argmax }))
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (oh, ow) = pool_dims(&s, kernel, stride).ok_or_else(|| mismatch("avgpool2d", &s, &[kernel, stride]))?;
        let (h, w) = (s[2], s[3]);
        let xd = self.value(x).data();
        let inv = 1.0 / (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for p in 0..s[0] * s[1] {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        acc += xd[row..row + kernel].iter().sum::<f64>();
                    }
                    out.push(acc * inv);
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, rg, Op::AvgPool2d { x, kernel, stride }))
    }

    /// Temperature-scaled softmax over the last axis: `softmax(x / tau)`.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("softmax", tau)?;
        let value = softmax_rows(self.value(x), tau);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softmax { x, tau }))
    }

    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("log_softmax", tau)?;
        let value = log_softmax_rows(self.value(x), tau);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::LogSoftmax { x, tau }))
    }

    /// Mean cross-entropy of `(batch, classes)` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(mismatch("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {} classes", s[1])));
        }
        let ls = log_softmax_rows(self.value(logits), 1.0);
        let loss = -labels.iter().enumerate().map(|(i, &l)| ls.data()[i * s[1] + l]).sum::<f64>() / s[0] as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    /// Apply a fixed linear resampling map to every `(h, w)` plane.
    pub fn resample(&mut self, x: Var, plan: Arc<ResamplePlan>) -> Result<Var> {
        let value = plan.apply(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Resample { x, plan }))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w) = self.plane_dims(x, "bilinear_resize")?;
        self.resample(x, Arc::new(ResamplePlan::resize(h, w, out_h, out_w)?))
    }

    /// Rotate every plane by `degrees` about its centre; out-of-frame samples read `fill`.
    pub fn rotate(&mut self, x: Var, degrees: f64, fill: f64) -> Result<Var> {
        let (h, w) = self.plane_dims(x, "rotate")?;
        self.resample(x, Arc::new(ResamplePlan::rotate(h, w, degrees, fill)))
    }

    pub fn pad(&mut self, x: Var, pad: usize, fill: f64) -> Result<Var> {
        let (h, w) = self.plane_dims(x, "pad")?;
        self.resample(x, Arc::new(ResamplePlan::pad(h, w, pad, fill)))
    }

    fn plane_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(mismatch(op, s, &[0, 0]));
        }
        Ok((s[s.len() - 2], s[s.len() - 1]))
    }

    /// Stack equally-shaped values along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = items.iter().map(|&v| self.value(v).clone()).collect();
        let value = Tensor::stack(&tensors)?;
        let rg = self.rg(items);
        Ok(self.push(value, rg, Op::Stack(items.to_vec())))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root).to_vec();
        if numel(&root_shape) != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::DetachedRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        // Lazily allocated, zero-initialised gradient buffer for input `v`,
        // or None when `v` does not need one.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(ga) = acc!(v) {
                        axpy(ga, g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(ga) = acc!(v) {
                        axpy(ga, g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = acc!(*x) {
                    axpy(gx, g, *k);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Relu(x) => {
                let xd = val(*x);
                if let Some(gx) = acc!(*x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                if let Some(gx) = acc!(*x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xd = val(*x);
                if let Some(gx) = acc!(*x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi / xi;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Recip(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o -= gi * yi * yi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let k = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += k);
                }
            }
            Op::SumLast(x) => {
                if let Some(gx) = acc!(*x) {
                    let k = gx.len() / g.len().max(1);
                    for (chunk, &gi) in gx.chunks_mut(k).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::L2Norm(x) => {
                let xd = val(*x);
                if let Some(gx) = acc!(*x) {
                    if y[0] > 0.0 {
                        let k = g[0] / y[0];
                        axpy(gx, xd, k);
                    }
                }
            }
            Op::RowL2Norm(x) => {
                let xd = val(*x);
                if let Some(gx) = acc!(*x) {
                    let inner = xd.len() / y.len().max(1);
                    for r in 0..y.len() {
                        if y[r] > 0.0 {
                            let k = g[r] / y[r];
                            axpy(&mut gx[r * inner..(r + 1) * inner], &xd[r * inner..(r + 1) * inner], k);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..m {
                        for p in 0..k {
                            axpy(&mut gb[p * n..(p + 1) * n], &g[i * n..(i + 1) * n], ad[i * k + p]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
                let (xd, wd) = (val(*x), val(*w));
                if let Some(gx) = acc!(*x) {
                    for i in 0..batch {
                        for j in 0..fout {
                            axpy(&mut gx[i * fin..(i + 1) * fin], &wd[j * fin..(j + 1) * fin], g[i * fout + j]);
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for i in 0..batch {
                        for j in 0..fout {
                            axpy(&mut gw[j * fin..(j + 1) * fin], &xd[i * fin..(i + 1) * fin], g[i * fout + j]);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = acc!(*b) {
                        for row in g.chunks(fout) {
                            axpy(gb, row, 1.0);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*w), *spec).expect("validated in forward");
                let (xd, wd) = (val(*x), val(*w));
                if let Some(gx) = acc!(*x) {
                    geo.backward_input(g, wd, gx);
                }
                if let Some(gw) = acc!(*w) {
                    geo.backward_weight(g, xd, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = acc!(*b) {
                        for (plane, chunk) in g.chunks(geo.oh * geo.ow).enumerate() {
                            gb[plane % geo.o] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = acc!(*x) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src as usize] += gi;
                    }
                }
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let inv = 1.0 / (kernel * kernel) as f64;
                if let Some(gx) = acc!(*x) {
                    for p in 0..s[0] * s[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = g[(p * oh + oy) * ow + ox] * inv;
                                for ky in 0..*kernel {
                                    let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                                    gx[row..row + kernel].iter_mut().for_each(|o| *o += gi);
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, tau } => {
                if let Some(gx) = acc!(*x) {
                    let k = *node.value.shape().last().unwrap_or(&1);
                    for ((gxr, gr), yr) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let s = dot(gr, yr);
                        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - s) * yi / tau;
                        }
                    }
                }
            }
            Op::LogSoftmax { x, tau } => {
                if let Some(gx) = acc!(*x) {
                    let k = *node.value.shape().last().unwrap_or(&1);
                    for ((gxr, gr), yr) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let s: f64 = gr.iter().sum();
                        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi.exp() * s) / tau;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let p = softmax_rows(&self.nodes[logits.0].value, 1.0);
                if let Some(gl) = acc!(*logits) {
                    let k = p.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (p.data()[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Resample { x, plan } => {
                if let Some(gx) = acc!(*x) {
                    plan.backward_into(g, gx);
                }
            }
            Op::Stack(items) => {
                let inner = g.len() / items.len().max(1);
                for (i, &v) in items.iter().enumerate() {
                    if let Some(gv) = acc!(v) {
                        axpy(gv, &g[i * inner..(i + 1) * inner], 1.0);
                    }
                }
            }
        }
    }
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("temperature must be positive, got {tau}")))
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pool_dims(s: &[usize], kernel: usize, stride: usize) -> Option<(usize, usize)> {
    if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
        return None;
    }
    Some(((s[2] - kernel) / stride + 1, (s[3] - kernel) / stride + 1))
}

/// Row-wise `softmax(x / tau)` over the last axis, max-shifted for stability.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let k = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = ((v - m) / tau).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub fn log_softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let k = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| ((v - m) / tau).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| (v - m) / tau - lse));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Shapes and index arithmetic shared by the conv forward and backward loops.
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], spec: Conv2dSpec) -> Option<Self> {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (s, p) = (spec.stride, spec.padding);
        if h + 2 * p < kh || w + 2 * p < kw {
            return None;
        }
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        Some(Self { n, c, h, w, o, kh, kw, oh, ow, stride: s, pad: p })
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Output column range whose input column `ox*stride + kx - pad` is inside the image.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (self.w as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, (hi.max(0) as usize).min(self.ow))
    }

    /// Visit every (input plane, output plane, weight, row pair, column span).
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        for n in 0..self.n {
            for o in 0..self.o {
                for c in 0..self.c {
                    let in_plane = (n * self.c + c) * self.h * self.w;
                    let out_plane = (n * self.o + o) * self.oh * self.ow;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let widx = ((o * self.c + c) * self.kh + ky) * self.kw + kx;
                            let (lo, hi) = self.col_range(kx);
                            if lo >= hi {
                                continue;
                            }
                            let off = kx as isize - self.pad as isize;
                            for oy in 0..self.oh {
                                if let Some(iy) = self.in_row(oy, ky) {
                                    f(widx, in_plane + iy * self.w, out_plane + oy * self.ow, lo, hi, off);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let s = self.stride;
        self.for_each_tap(|widx, in_row, out_row, lo, hi, off| {
            let wv = w[widx];
            let dst = &mut out[out_row + lo..out_row + hi];
            if s == 1 {
                let start = (in_row as isize + lo as isize + off) as usize;
                let src = &x[start..start + (hi - lo)];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wv * v;
                }
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    let ix = ((lo + i) * s) as isize + off;
                    *d += wv * x[in_row + ix as usize];
                }
            }
        });
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let s = self.stride;
        self.for_each_tap(|widx, in_row, out_row, lo, hi, off| {
            let wv = w[widx];
            let src = &g[out_row + lo..out_row + hi];
            if s == 1 {
                let start = (in_row as isize + lo as isize + off) as usize;
                for (d, &v) in gx[start..start + (hi - lo)].iter_mut().zip(src) {
                    *d += wv * v;
                }
            } else {
                for (i, &v) in src.iter().enumerate() {
                    let ix = ((lo + i) * s) as isize + off;
                    gx[in_row + ix as usize] += wv * v;
                }
            }
        });
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let s = self.stride;
        self.for_each_tap(|widx, in_row, out_row, lo, hi, off| {
            let src = &g[out_row + lo..out_row + hi];
            let acc = if s == 1 {
                let start = (in_row as isize + lo as isize + off) as usize;
                dot(src, &x[start..start + (hi - lo)])
            } else {
                src.iter()
                    .enumerate()
                    .map(|(i, &v)| v * x[in_row + (((lo + i) * s) as isize + off) as usize])
                    .sum()
            };
            gw[widx] += acc;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_worked_example() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![2.0, 0.0]));
        let y = t.softmax(x, 1.0).unwrap();
        let d = t.value(y).data();
        assert!(close(d[0], 0.880797, 1e-6));
        assert!(close(d[1], 0.119203, 1e-6));
    }

    #[test]
    fn softmax_constant_logits_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[5], 3.3));
        for tau in [0.5, 1.0, 7.0] {
            let y = t.softmax(x, tau).unwrap();
            assert!(t.value(y).data().iter().all(|&p| close(p, 0.2, 1e-15)));
        }
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[3], 0.0));
        assert!(t.softmax(x, 0.0).is_err());
        assert!(t.softmax(x, -1.0).is_err());
    }

    #[test]
    fn l2_norm_3_4_5() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let n = t.l2_norm(x);
        assert_eq!(t.value(n).item(), 5.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_log_norm() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![3.0, 4.0]), true);
        let n = t.l2_norm(x);
        let l = t.log(n);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap().data();
        assert!(close(g[0], 3.0 / 25.0, 1e-15));
        assert!(close(g[1], 4.0 / 25.0, 1e-15));
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
        let c = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let s = t.sum(c);
        assert!(matches!(t.backward(s), Err(Error::DetachedRoot)));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let a = t.add(x, x).unwrap();
        let b = t.mul(a, x).unwrap(); // 2x^2
        t.backward(b).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 8.0);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let x = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = t.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(t.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 1 }), Err(Error::ShapeMismatch { op: "conv2d", .. })));
    }

    #[test]
    fn conv_matches_naive() {
        use crate::rng::Rng;
        let mut rng = Rng::new(3);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::normal(&[2, 3, 7, 6], 0.0, 1.0, &mut rng);
            let w = Tensor::normal(&[4, 3, 3, 2], 0.0, 1.0, &mut rng);
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv2d(xv, wv, None, Conv2dSpec { stride, padding }).unwrap();
            let ys = t.value(y).shape().to_vec();
            let (oh, ow) = (ys[2], ys[3]);
            for n in 0..2 {
                for o in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..2 {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                            continue;
                                        }
                                        acc += w.data()[((o * 3 + c) * 3 + ky) * 2 + kx]
                                            * x.data()[((n * 3 + c) * 7 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                            let got = t.value(y).data()[((n * 4 + o) * oh + oy) * ow + ox];
                            assert!(close(got, acc, 1e-12), "stride {stride} pad {padding}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap(), true);
        let p = t.maxpool2d(x, 2, 2).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_kink_has_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]), true);
        let r = t.relu(x);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
