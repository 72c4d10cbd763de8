use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::params::{GradientMap, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Gelu,
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Act(Activation),
    Ln,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    Unary(Var, Unary),
    /// Local derivative saved by the forward pass.
    Gelu {
        input: Var,
        deriv: Vec<f64>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Linear record of one forward pass. Rebuilt per pass; reverse order of
/// the record is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a free leaf. Gradients for leaves with `requires_grad` are
    /// reported through [`GradientMap::wrt`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Places a stored parameter on the tape. Repeated calls with the same id
    /// return the same node so fan-out accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("zip of equal shapes")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// Adds a vector `b[d]` to every length-`d` row of `x[.., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d.max(1)) {
            for (a, c) in row.iter_mut().zip(&bias) {
                *a += c;
            }
        }
        Ok(self.push(v, Op::AddBias(x, b), &[x, b]))
    }

    /// Adds `b[C]` to every plane of `x[C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || self.shape(b) != [s[0]] {
            return Err(Error::dim("channel_bias", s, self.shape(b)));
        }
        let plane = s[1] * s[2];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (c, chunk) in v.data_mut().chunks_mut(plane.max(1)).enumerate() {
            chunk.iter_mut().for_each(|a| *a += bias[c]);
        }
        Ok(self.push(v, Op::ChannelBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::Shift(x), &[x])
    }

    /// `x · s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|a| a * c);
        Ok(self.push(v, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Cross-correlation of `input[C, H, W]` with `kernel[F, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::dim("conv2d", si, sk));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim("conv2d", si, sk));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; f * geom.out_len()];
        kernels::gemm(
            f,
            geom.patch_len(),
            geom.out_len(),
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let v = Tensor::new(&[f, geom.out_h, geom.out_w], out)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Per-window maximum over `input[C, H, W]`. Ties resolve to the first
    /// position in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || window == 0 || window > s[1] || window > s[2] {
            return Err(Error::dim("maxpool2d", s, &[window, window]));
        }
        if stride == 0 {
            return Err(Error::contract("maxpool2d stride must be at least 1"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_val = f64::NEG_INFINITY;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = (ch * h + oy * stride + i) * w + ox * stride + j;
                            if best == usize::MAX || src[idx] > best_val {
                                best = idx;
                                best_val = src[idx];
                            }
                        }
                    }
                    out.push(best_val);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Nearest-neighbour 2× upsampling of `x[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim("upsample2x", s, &[]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Act(Activation::Gelu) => {
                let xv = self.value(x);
                let wants = self.requires_grad(x);
                let mut deriv = Vec::with_capacity(if wants { xv.len() } else { 0 });
                let mut out = Vec::with_capacity(xv.len());
                for &a in xv.data() {
                    let cdf = kernels::normal_cdf(a);
                    if wants {
                        deriv.push(cdf + a * kernels::normal_pdf(a));
                    }
                    out.push(a * cdf);
                }
                let v = Tensor::new(xv.shape(), out).expect("same shape");
                return self.push(v, Op::Gelu { input: x, deriv }, &[x]);
            }
            Unary::Act(Activation::Softplus) => kernels::softplus,
            Unary::Act(Activation::Sigmoid) => kernels::sigmoid,
            Unary::Act(Activation::LeakyRelu(slope)) => {
                let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
                return self.push(v, Op::Unary(x, u), &[x]);
            }
            Unary::Ln => f64::ln,
            Unary::Exp => f64::exp,
        };
        let v = self.value(x).map(f);
        self.push(v, Op::Unary(x, u), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        self.unary(x, Unary::Act(kind))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("square of one operand")
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let mut out = self.value(x).data().to_vec();
        if inner == 1 {
            for row in out.chunks_mut(len.max(1)) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            let v = Tensor::new(&s, out)?;
            return Ok(self.push(v, Op::Softmax { input: x, axis }, &[x]));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (out[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let v = Tensor::new(&s, out)?;
        Ok(self.push(v, Op::Softmax { input: x, axis }, &[x]))
    }

    /// Normalizes each row of `x[n, d]` to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::dim("layer_norm", s, &[]));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) * r);
            inv_std.push(r);
        }
        let v = Tensor::new(&[n, d], out)?;
        Ok(self.push(v, Op::LayerNorm { input: x, inv_std }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Column means of `x[n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim("mean_rows", s, &[]));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), &[x]))
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), parts)
    }

    /// Flat slice `[start, start + len)` as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.len() {
            return Err(Error::dim("slice", t.shape(), &[start, len]));
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(v, Op::Slice { input: x, start }, &[x]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = GradientMap::default();
        for (&id, &v) in &self.params {
            if self.nodes[v.0].requires_grad {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                map.params.insert(id, g);
            }
        }
        let param_nodes: std::collections::HashSet<usize> =
            self.params.values().map(|v| v.0).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && !param_nodes.contains(&i) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                map.leaves.insert(i, g);
            }
        }
        Ok(map)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, zip_with(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    send(*b, zip_with(g, val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    send(*a, zip_with(g, bv, |x, y| x / y));
                }
                if wants(*b) {
                    let out = &self.nodes[i].value;
                    let t = zip_with(g, out, |x, o| x * o);
                    send(*b, zip_with(&t, bv, |x, y| -x / y));
                }
            }
            Op::AddBias(x, b) => {
                send(*x, g.clone());
                if wants(*b) {
                    let d = val(*b).len();
                    let mut acc = vec![0.0; d];
                    for row in gd.chunks(d.max(1)) {
                        for (a, r) in acc.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    send(*b, Tensor::vector(acc));
                }
            }
            Op::ChannelBias(x, b) => {
                send(*x, g.clone());
                if wants(*b) {
                    let s = g.shape();
                    let plane = (s[1] * s[2]).max(1);
                    let acc = gd.chunks(plane).map(|c| c.iter().sum()).collect();
                    send(*b, Tensor::vector(acc));
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|a| a * c)),
            Op::Shift(x) => send(*x, g.clone()),
            Op::ScaleBy(x, s) => {
                let c = val(*s).item();
                if wants(*x) {
                    send(*x, g.map(|a| a * c));
                }
                if wants(*s) {
                    let dot = gd.iter().zip(val(*x).data()).map(|(p, q)| p * q).sum();
                    send(*s, Tensor::new(val(*s).shape(), vec![dot]).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, bv.data(), true, &mut da, 0.0);
                    send(*a, Tensor::new(av.shape(), da).unwrap());
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                    send(*b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Transpose(x) => {
                let s = g.shape();
                let (r, c) = (s[0], s[1]);
                let mut out = vec![0.0; r * c];
                for p in 0..r {
                    for q in 0..c {
                        out[q * r + p] = gd[p * c + q];
                    }
                }
                send(*x, Tensor::new(&[c, r], out).unwrap());
            }
            Op::Reshape(x) => send(*x, g.clone().reshape(val(*x).shape()).unwrap()),
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let f = val(*kernel).shape()[0];
                if wants(*kernel) {
                    let cols = kernels::im2col(val(*input).data(), geom);
                    let mut dk = vec![0.0; f * geom.patch_len()];
                    kernels::gemm(
                        f,
                        geom.out_len(),
                        geom.patch_len(),
                        gd,
                        false,
                        &cols,
                        true,
                        &mut dk,
                        0.0,
                    );
                    send(*kernel, Tensor::new(val(*kernel).shape(), dk).unwrap());
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; geom.patch_len() * geom.out_len()];
                    kernels::gemm(
                        geom.patch_len(),
                        f,
                        geom.out_len(),
                        val(*kernel).data(),
                        true,
                        gd,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let dx = kernels::col2im(&dcols, geom);
                    send(*input, Tensor::new(val(*input).shape(), dx).unwrap());
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros(val(*input).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                send(*input, dx);
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                send(*x, Tensor::new(s, dx).unwrap());
            }
            Op::Unary(x, u) => {
                let xv = val(*x);
                let out = &self.nodes[i].value;
                let dx: Vec<f64> = match u {
                    Unary::Act(Activation::Gelu) => unreachable!("recorded as Op::Gelu"),
                    Unary::Act(Activation::LeakyRelu(slope)) => xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&a, &gv)| if a > 0.0 { gv } else { gv * slope })
                        .collect(),
                    Unary::Act(Activation::Softplus) => xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&a, &gv)| gv * kernels::sigmoid(a))
                        .collect(),
                    Unary::Act(Activation::Sigmoid) => out
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect(),
                    Unary::Ln => xv.data().iter().zip(gd).map(|(&a, &gv)| gv / a).collect(),
                    Unary::Exp => out.data().iter().zip(gd).map(|(&e, &gv)| gv * e).collect(),
                };
                send(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::Gelu { input, deriv } => {
                let dx = deriv.iter().zip(gd).map(|(d, g)| d * g).collect();
                send(*input, Tensor::new(g.shape(), dx).unwrap());
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[i].value.data();
                let s = g.shape();
                let (outer, len, inner) = axis_split(s, *axis);
                let mut dx = vec![0.0; y.len()];
                if inner == 1 {
                    let n = len.max(1);
                    for ((d, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    send(*input, Tensor::new(s, dx).unwrap());
                    return;
                }
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + q;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                send(*input, Tensor::new(s, dx).unwrap());
            }
            Op::LayerNorm { input, inv_std } => {
                let y = self.nodes[i].value.data();
                let d = g.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (yr, gr) = (&y[span.clone()], &gd[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (k, o) in dx[span].iter_mut().enumerate() {
                        *o = istd * (gr[k] - mean_g - yr[k] * mean_gy);
                    }
                }
                send(*input, Tensor::new(g.shape(), dx).unwrap());
            }
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                send(*x, Tensor::full(val(*x).shape(), gd[0] / n));
            }
            Op::MeanRows(x) => {
                let s = val(*x).shape();
                let n = s[0] as f64;
                let mut dx = Vec::with_capacity(s[0] * s[1]);
                for _ in 0..s[0] {
                    dx.extend(gd.iter().map(|a| a / n));
                }
                send(*x, Tensor::new(s, dx).unwrap());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let shape = val(*p).shape();
                    let n = val(*p).len();
                    if wants(*p) {
                        send(*p, Tensor::new(shape, gd[off..off + n].to_vec()).unwrap());
                    }
                    off += n;
                }
            }
            Op::Slice { input, start } => {
                let mut dx = Tensor::zeros(val(*input).shape());
                dx.data_mut()[*start..*start + gd.len()].copy_from_slice(gd);
                send(*input, dx);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}
