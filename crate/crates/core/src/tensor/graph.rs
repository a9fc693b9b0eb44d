use std::sync::Arc;

use super::kernels::{self, same_dtype};
use super::{DType, Tensor};
use crate::encoder::AttentionMask;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MatMulConst { x: Var, left: Arc<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes are pushed after their inputs, so index order is
/// a topological order and the reverse sweep visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `left . x` for a fixed left operand, e.g. an interpolation matrix.
    pub fn matmul_const(&mut self, left: Arc<Tensor>, x: Var) -> Result<Var> {
        let out = kernels::matmul(&left, self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MatMulConst { x, left }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dtype = same_dtype("add", ta, tb)?;
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), dtype, data);
        out.ensure_finite("add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[c]` bias to every row of an `[r x c]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let dtype = same_dtype("add_bias", tx, tb)?;
        let (r, c) = tx.dims2()?;
        if tb.shape() != [c] {
            return Err(Error::shape("add_bias", format!("[{c}]"), format!("{:?}", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vec![r, c], dtype, data);
        out.ensure_finite("add_bias")?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dtype = same_dtype("mul", ta, tb)?;
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), dtype, data);
        out.ensure_finite("mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        out.ensure_finite("scale")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, s), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let out = Tensor::from_parts(vec![1], t.dtype(), vec![s]);
        out.ensure_finite("sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_fwd(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: cache.xhat,
            rstd: cache.rstd,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let out = kernels::masked_softmax(self.value(x), mask)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let op = Op::Conv2d {
            x,
            kernel,
            bias,
            stride,
            padding,
        };
        Ok(self.push(out, op, rg))
    }

    /// Mean cross-entropy over rows; returns a `[1]` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (loss, probs) = kernels::cross_entropy_fwd(t, labels)?;
        let out = Tensor::from_parts(vec![1], t.dtype(), vec![loss]);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", format!("rows within {r}"), format!("{start}..{}", start + len)));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_parts(vec![len, c], t.dtype(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?);
        let (_, c) = first.dims2()?;
        let dtype = first.dtype();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, pc) = t.dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{c} columns"), format!("{pc}")));
            }
            same_dtype("concat_rows", first, t)?;
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![rows, c], dtype, data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("columns within {c}"), format!("{start}..{}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], t.dtype(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?);
        let (r, _) = first.dims2()?;
        let dtype = first.dtype();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.dims2()?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{r} rows"), format!("{pr}")));
            }
            same_dtype("concat_cols", first, t)?;
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![r, total], dtype, data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Reverse sweep from a single-element `loss`. Only nodes that require a
    /// gradient are visited.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            acc[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = acc[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &dy, &mut acc)?;
            acc[idx] = Some(dy);
        }
        let grads = acc
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad && matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), n.value.dtype(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, acc: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut acc[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, dy: &[f64], acc: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.wants(*a) {
                    // dA = dC . B^T
                    let bt = kernels::transpose(tb)?;
                    self.accumulate(acc, *a, kernels::matmul_raw(dy, bt.data(), m, n, k));
                }
                if self.wants(*b) {
                    // dB = A^T . dC
                    let at = kernels::transpose(ta)?;
                    self.accumulate(acc, *b, kernels::matmul_raw(at.data(), dy, k, m, n));
                }
            }
            Op::MatMulConst { x, left } => {
                let (m, k) = left.dims2()?;
                let n = dy.len() / m;
                let lt = kernels::transpose(left)?;
                self.accumulate(acc, *x, kernels::matmul_raw(lt.data(), dy, k, m, n));
            }
            Op::Add(a, b) => {
                self.accumulate(acc, *a, dy.to_vec());
                self.accumulate(acc, *b, dy.to_vec());
            }
            Op::AddBias(x, b) => {
                self.accumulate(acc, *x, dy.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let mut g = vec![0.0; c];
                    for row in dy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(acc, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(acc, *a, dy.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(acc, *b, dy.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(acc, *x, dy.iter().map(|g| g * s).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(acc, *x, vec![dy[0]; n]);
            }
            Op::Gelu(x) => {
                let g = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| g * kernels::gelu_grad_scalar(v))
                    .collect();
                self.accumulate(acc, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dyr = &dy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = dyr[c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..d {
                            let dh = dyr[c] * gv[c];
                            dx[r * d + c] = rs / d as f64 * (d as f64 * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    self.accumulate(acc, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (row, hrow) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += row[c] * hrow[c];
                        }
                    }
                    self.accumulate(acc, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for row in dy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(acc, *beta, db);
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.shape()[0];
                let mut dx = vec![0.0; y.len()];
                for r in 0..n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &dy[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(acc, *x, dx);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => self.conv2d_backward(*x, *kernel, *bias, *stride, *padding, dy, acc)?,
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = dy[0] / n as f64;
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * c + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(acc, *logits, g);
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2()?;
                let mut g = vec![0.0; dy.len()];
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] = dy[i * c + j];
                    }
                }
                self.accumulate(acc, *x, g);
            }
            Op::Reshape(x) => self.accumulate(acc, *x, dy.to_vec()),
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let (_, c) = src.dims2()?;
                    let mut g = vec![0.0; src.numel()];
                    g[start * c..start * c + dy.len()].copy_from_slice(dy);
                    self.accumulate(acc, *x, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(acc, p, dy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let (r, c) = src.dims2()?;
                    let len = dy.len() / r;
                    let mut g = vec![0.0; src.numel()];
                    for i in 0..r {
                        g[i * c + start..i * c + start + len].copy_from_slice(&dy[i * len..(i + 1) * len]);
                    }
                    self.accumulate(acc, *x, g);
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(r * w);
                        for i in 0..r {
                            g.extend_from_slice(&dy[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(acc, p, g);
                    }
                    off += w;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dy: &[f64],
        acc: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let g = kernels::conv2d_geometry(tx.shape(), tk.shape(), stride, padding)?;
        let (xs, ks) = (tx.data(), tk.data());
        let plane = g.out_h * g.out_w;
        let want_x = self.wants(x);
        let want_k = self.wants(kernel);
        let mut dx = if want_x { vec![0.0; xs.len()] } else { Vec::new() };
        let mut dk = if want_k { vec![0.0; ks.len()] } else { Vec::new() };
        for co in 0..g.c_out {
            let dyc = &dy[co * plane..(co + 1) * plane];
            for ci in 0..g.c_in {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kidx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        let wv = ks[kidx];
                        let mut kacc = 0.0;
                        for oy in 0..g.out_h {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let base = (ci * g.h + iy as usize) * g.w;
                            for ox in 0..g.out_w {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let gy = dyc[oy * g.out_w + ox];
                                if want_x {
                                    dx[base + ix as usize] += wv * gy;
                                }
                                kacc += xs[base + ix as usize] * gy;
                            }
                        }
                        if want_k {
                            dk[kidx] += kacc;
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(acc, x, dx);
        }
        if want_k {
            self.accumulate(acc, kernel, dk);
        }
        if let Some(b) = bias {
            if self.wants(b) {
                let db = dy.chunks(plane).map(|p| p.iter().sum()).collect();
                self.accumulate(acc, b, db);
            }
        }
        Ok(())
    }
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}
