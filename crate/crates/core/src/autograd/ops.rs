use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, gemm, ConvGeom, Layout};
use super::{accumulate, accumulate_with, Node, Tape, Var};
use crate::math::{exp, log_sum_exp, sqrt};
use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor};

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: Real },
    Relu { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<Real>, inv_std: Vec<Real> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<Real>, inv_std: Vec<Real> },
    AvgPool { x: usize, rows: Vec<(usize, usize)>, cols: Vec<(usize, usize)> },
    MaxPool { x: usize, argmax: Vec<usize> },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    SliceCols { x: usize, start: usize },
    Sum { x: usize },
    Mean { x: usize },
    CrossEntropy { logits: usize, probs: Vec<Real>, labels: Vec<usize> },
    SoftCrossEntropy { logits: usize, probs: Vec<Real>, target: Tensor },
}

/// Average-pool geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Fixed square window, no padding.
    Window { kernel: usize, stride: usize },
    /// Output of fixed size; windows chosen so every input cell is covered.
    Adaptive { out_h: usize, out_w: usize },
}

/// Per-channel statistics of one training-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Biased (divide by count) variance.
    pub var: Vec<Real>,
    /// Number of values averaged per channel.
    pub count: usize,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn bad(op: &'static str, msg: alloc::string::String) -> Error {
    Error::InvalidShape { op, msg }
}

/// `[N, C, inner]` factorisation of a batchnorm input.
fn bn_dims(op: &'static str, shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 2 && shape.len() != 4 {
        return Err(bad(op, format!("expected [N,C] or [N,C,H,W], got {:?}", shape)));
    }
    if shape[1] != channels {
        return Err(mismatch(op, shape, &[channels]));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<'a> Tape<'a> {
    fn any_grad(&self, ids: &[Var]) -> bool {
        ids.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        if self.any_grad(inputs) {
            let op = op();
            self.push(Cow::Owned(value), op, true)
        } else {
            self.push(Cow::Owned(value), Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, self.value(a).data(), Layout::rm(k), self.value(b).data(), Layout::rm(n), 0.0, out.data_mut(), Layout::rm(n));
        Ok(self.record(out, &[a, b], || Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `x * w^T + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch("linear", sx, sw));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = Tensor::zeros(&[n, o]);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [o] {
                return Err(mismatch("linear", bias.shape(), &[o]));
            }
            for row in out.data_mut().chunks_exact_mut(o.max(1)) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, i, o, 1.0, self.value(x).data(), Layout::rm(i), self.value(w).data(), Layout::tr(i), beta, out.data_mut(), Layout::rm(o));
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.record(out, &ins, || Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", sx, sw));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, r, s) = (sw[0], sw[2], sw[3]);
        let (Some(oh), Some(ow)) = (kernels::out_extent(h, r, stride, pad), kernels::out_extent(wd, s, stride, pad)) else {
            return Err(bad("conv2d", format!("kernel {}x{} stride {} pad {} does not fit input {:?}", r, s, stride, pad, sx)));
        };
        let geom = ConvGeom { c, h, w: wd, r, s, stride, pad, oh, ow };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        let mut col = vec![0.0; rows * p];
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        for i in 0..n {
            kernels::im2col(&xin[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col);
            let dst = &mut out.data_mut()[i * k * p..(i + 1) * k * p];
            gemm(k, rows, p, 1.0, wt, Layout::rm(rows), &col, Layout::rm(p), 0.0, dst, Layout::rm(p));
        }
        Ok(self.record(out, &[x, w], || Op::Conv2d { x: x.0, w: w.0, geom }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], || Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], || Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.record(out, &[x], || Op::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.record(out, &[x], || Op::Relu { x: x.0 })
    }

    /// Training-mode batchnorm: normalises with the batch's own statistics
    /// and differentiates through them.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<(Var, BatchStats)> {
        let ch = self.value(gamma).len();
        let (n, c, inner) = bn_dims("batchnorm", self.shape(x), ch)?;
        if self.value(beta).len() != c {
            return Err(mismatch("batchnorm", self.shape(beta), &[c]));
        }
        let count = n * inner;
        if count == 0 {
            return Err(bad("batchnorm", "empty batch".into()));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (ci, m) in mean.iter_mut().enumerate() {
                let base = (i * c + ci) * inner;
                *m += xs[base..base + inner].iter().sum::<Real>();
            }
        }
        for m in mean.iter_mut() {
            *m /= count as Real;
        }
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * inner;
                var[ci] += xs[base..base + inner].iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<Real>();
            }
        }
        for v in var.iter_mut() {
            *v /= count as Real;
        }
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / sqrt(v + eps)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = Tensor::zeros(self.shape(x));
        let od = out.data_mut();
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * inner;
                for j in base..base + inner {
                    let h = (xs[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    od[j] = g[ci] * h + b[ci];
                }
            }
        }
        let stats = BatchStats { mean, var, count };
        let v = self.record(out, &[x, gamma, beta], || Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std });
        Ok((v, stats))
    }

    /// Evaluation-mode batchnorm with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[Real], var: &[Real], eps: Real) -> Result<Var> {
        let ch = self.value(gamma).len();
        let (n, c, inner) = bn_dims("batchnorm", self.shape(x), ch)?;
        if mean.len() != c || var.len() != c || self.value(beta).len() != c {
            return Err(mismatch("batchnorm", self.shape(x), &[mean.len(), var.len()]));
        }
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / sqrt(v + eps)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut out = Tensor::zeros(self.shape(x));
        let od = out.data_mut();
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * inner;
                let (sc, sh) = (g[ci] * inv_std[ci], b[ci] - g[ci] * inv_std[ci] * mean[ci]);
                for j in base..base + inner {
                    od[j] = sc * xs[j] + sh;
                }
            }
        }
        let mean = mean.to_vec();
        Ok(self.record(out, &[x, gamma, beta], || Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, mean, inv_std }))
    }

    pub fn avgpool(&mut self, x: Var, pool: Pool) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(bad("avgpool", format!("expected NCHW input, got {:?}", sx)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let windows = |len: usize, axis: &str| -> Result<Vec<(usize, usize)>> {
            match pool {
                Pool::Window { kernel, stride } => {
                    let out = kernels::out_extent(len, kernel, stride, 0).ok_or_else(|| {
                        bad("avgpool", format!("window {} stride {} does not fit {} extent {}", kernel, stride, axis, len))
                    })?;
                    Ok((0..out).map(|i| (i * stride, i * stride + kernel)).collect())
                }
                Pool::Adaptive { out_h, out_w } => {
                    let out = if axis == "height" { out_h } else { out_w };
                    if out == 0 || len == 0 {
                        return Err(bad("avgpool", "zero-sized adaptive pool".into()));
                    }
                    Ok((0..out).map(|i| kernels::adaptive_window(i, len, out)).collect())
                }
            }
        };
        let rows = windows(h, "height")?;
        let cols = windows(w, "width")?;
        let (oh, ow) = (rows.len(), cols.len());
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let xs = self.value(x).data();
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += src[r * w + c0..r * w + c1].iter().sum::<Real>();
                    }
                    od[(plane * oh + i) * ow + j] = s / ((r1 - r0) * (c1 - c0)) as Real;
                }
            }
        }
        Ok(self.record(out, &[x], || Op::AvgPool { x: x.0, rows, cols }))
    }

    /// Max pool with implicit negative-infinity padding.
    pub fn maxpool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || pad >= kernel.max(1) {
            return Err(bad("maxpool", format!("input {:?}, kernel {}, pad {}", sx, kernel, pad)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (Some(oh), Some(ow)) = (kernels::out_extent(h, kernel, stride, pad), kernels::out_extent(w, kernel, stride, pad)) else {
            return Err(bad("maxpool", format!("kernel {} does not fit {:?}", kernel, sx)));
        };
        let xs = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let od = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = Real::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for r in 0..kernel {
                        let ih = (i * stride + r) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for s in 0..kernel {
                            let iw = (j * stride + s) as isize - pad as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if xs[idx] > best || at == usize::MAX {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * oh + i) * ow + j;
                    od[o] = best;
                    argmax[o] = at;
                }
            }
        }
        Ok(self.record(out, &[x], || Op::MaxPool { x: x.0, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, &[x], || Op::Reshape { x: x.0 }))
    }

    /// Flattens everything after the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = numel(&s[1..]);
        self.reshape(x, &[n, rest])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| bad("concat", "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(bad("concat", format!("axis {} out of range for {:?}", axis, first)));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ids = xs.iter().map(|v| v.0).collect();
        Ok(self.record(out, xs, || Op::Concat { xs: ids, axis }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(bad("slice_cols", format!("columns {}..{} of {:?}", start, end, s)));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![n, end - start], data)?;
        Ok(self.record(out, &[x], || Op::SliceCols { x: x.0, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, &[x], || Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len().max(1) as Real);
        self.record(out, &[x], || Op::Mean { x: x.0 })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad_label) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label: bad_label, classes: c });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = exp(row[j] - lse);
            }
        }
        let out = Tensor::scalar(loss / n.max(1) as Real);
        let labels = labels.to_vec();
        Ok(self.record(out, &[logits], || Op::CrossEntropy { logits: logits.0, probs, labels }))
    }

    /// Mean over the batch of `-sum_i target_i * log softmax(logits)_i`.
    /// The target distribution is a constant.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || target.shape() != s {
            return Err(mismatch("soft_cross_entropy", s, target.shape()));
        }
        let (n, c) = (s[0], s[1]);
        let z = self.value(logits).data();
        let p = target.data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                loss -= p[i * c + j] * (row[j] - lse);
                probs[i * c + j] = exp(row[j] - lse);
            }
        }
        let out = Tensor::scalar(loss / n.max(1) as Real);
        Ok(self.record(out, &[logits], || Op::SoftCrossEntropy { logits: logits.0, probs, target }))
    }
}

/// Propagates `g` (the gradient of node `i`) to its inputs.
pub(crate) fn backward_node(nodes: &[Node<'_>], i: usize, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |k: usize| -> &Tensor { &nodes[k].value };
    let rg = |k: usize| nodes[k].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                accumulate_with(&mut grads[*a], sa, |d| {
                    gemm(m, n, k, 1.0, g.data(), Layout::rm(n), val(*b).data(), Layout::tr(n), 1.0, d, Layout::rm(k))
                });
            }
            if rg(*b) {
                accumulate_with(&mut grads[*b], sb, |d| {
                    gemm(k, m, n, 1.0, val(*a).data(), Layout::tr(k), g.data(), Layout::rm(n), 1.0, d, Layout::rm(n))
                });
            }
        }
        Op::Linear { x, w, b } => {
            let (sx, sw) = (val(*x).shape(), val(*w).shape());
            let (n, inp, o) = (sx[0], sx[1], sw[0]);
            if rg(*x) {
                accumulate_with(&mut grads[*x], sx, |d| {
                    gemm(n, o, inp, 1.0, g.data(), Layout::rm(o), val(*w).data(), Layout::rm(inp), 1.0, d, Layout::rm(inp))
                });
            }
            if rg(*w) {
                accumulate_with(&mut grads[*w], sw, |d| {
                    gemm(o, n, inp, 1.0, g.data(), Layout::tr(o), val(*x).data(), Layout::rm(inp), 1.0, d, Layout::rm(inp))
                });
            }
            if let Some(b) = b {
                if rg(*b) {
                    accumulate_with(&mut grads[*b], &[o], |d| {
                        for row in g.data().chunks_exact(o.max(1)) {
                            for (acc, v) in d.iter_mut().zip(row) {
                                *acc += *v;
                            }
                        }
                    });
                }
            }
        }
        Op::Conv2d { x, w, geom } => {
            let sx = val(*x).shape().to_vec();
            let sw = val(*w).shape().to_vec();
            let (n, k) = (sx[0], sw[0]);
            let (rows, p) = (geom.col_rows(), geom.col_cols());
            let plane = geom.c * geom.h * geom.w;
            let mut col = vec![0.0; rows * p];
            let xin = val(*x).data();
            let wt = val(*w).data();
            if rg(*w) {
                let acc = grads[*w].get_or_insert_with(|| Tensor::zeros(&sw));
                for s in 0..n {
                    kernels::im2col(&xin[s * plane..(s + 1) * plane], geom, &mut col);
                    let go = &g.data()[s * k * p..(s + 1) * k * p];
                    gemm(k, p, rows, 1.0, go, Layout::rm(p), &col, Layout::tr(p), 1.0, acc.data_mut(), Layout::rm(rows));
                }
            }
            if rg(*x) {
                let acc = grads[*x].get_or_insert_with(|| Tensor::zeros(&sx));
                for s in 0..n {
                    let go = &g.data()[s * k * p..(s + 1) * k * p];
                    gemm(rows, k, p, 1.0, wt, Layout::tr(rows), go, Layout::rm(p), 0.0, &mut col, Layout::rm(p));
                    kernels::col2im(&col, geom, &mut acc.data_mut()[s * plane..(s + 1) * plane]);
                }
            }
        }
        Op::Add { a, b } => {
            if rg(*a) && rg(*b) {
                accumulate(&mut grads[*a], g.clone());
                accumulate(&mut grads[*b], g);
            } else if rg(*a) {
                accumulate(&mut grads[*a], g);
            } else if rg(*b) {
                accumulate(&mut grads[*b], g);
            }
        }
        Op::Mul { a, b } => {
            if rg(*a) {
                let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[*a], Tensor::new(g.shape().to_vec(), d)?);
            }
            if rg(*b) {
                let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[*b], Tensor::new(g.shape().to_vec(), d)?);
            }
        }
        Op::Scale { x, c } => {
            if rg(*x) {
                accumulate(&mut grads[*x], g.map(|v| v * c));
            }
        }
        Op::Relu { x } => {
            if rg(*x) {
                let d = g.data().iter().zip(val(*x).data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(&mut grads[*x], Tensor::new(g.shape().to_vec(), d)?);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let sx = val(*x).shape();
            let c = inv_std.len();
            let (n, _, inner) = bn_dims("batchnorm", sx, c)?;
            let m = (n * inner) as Real;
            let gam = val(*gamma).data();
            let gd = g.data();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for s in 0..n {
                for ci in 0..c {
                    let base = (s * c + ci) * inner;
                    for j in base..base + inner {
                        sum_dy[ci] += gd[j];
                        sum_dy_xhat[ci] += gd[j] * xhat[j];
                    }
                }
            }
            if rg(*gamma) {
                accumulate(&mut grads[*gamma], Tensor::from_vec(sum_dy_xhat.clone()));
            }
            if rg(*beta) {
                accumulate(&mut grads[*beta], Tensor::from_vec(sum_dy.clone()));
            }
            if rg(*x) {
                accumulate_with(&mut grads[*x], sx, |d| {
                    for s in 0..n {
                        for ci in 0..c {
                            let base = (s * c + ci) * inner;
                            let k = gam[ci] * inv_std[ci] / m;
                            for j in base..base + inner {
                                d[j] += k * (m * gd[j] - sum_dy[ci] - xhat[j] * sum_dy_xhat[ci]);
                            }
                        }
                    }
                });
            }
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let sx = val(*x).shape();
            let c = inv_std.len();
            let (n, _, inner) = bn_dims("batchnorm", sx, c)?;
            let gam = val(*gamma).data();
            let xs = val(*x).data();
            let gd = g.data();
            if rg(*x) {
                accumulate_with(&mut grads[*x], sx, |d| {
                    for s in 0..n {
                        for ci in 0..c {
                            let base = (s * c + ci) * inner;
                            for j in base..base + inner {
                                d[j] += gd[j] * gam[ci] * inv_std[ci];
                            }
                        }
                    }
                });
            }
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for s in 0..n {
                for ci in 0..c {
                    let base = (s * c + ci) * inner;
                    for j in base..base + inner {
                        dg[ci] += gd[j] * (xs[j] - mean[ci]) * inv_std[ci];
                        db[ci] += gd[j];
                    }
                }
            }
            if rg(*gamma) {
                accumulate(&mut grads[*gamma], Tensor::from_vec(dg));
            }
            if rg(*beta) {
                accumulate(&mut grads[*beta], Tensor::from_vec(db));
            }
        }
        Op::AvgPool { x, rows, cols } => {
            if rg(*x) {
                let sx = val(*x).shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (oh, ow) = (rows.len(), cols.len());
                let gd = g.data();
                accumulate_with(&mut grads[*x], sx, |d| {
                    for plane in 0..n * c {
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for (i, &(r0, r1)) in rows.iter().enumerate() {
                            for (j, &(c0, c1)) in cols.iter().enumerate() {
                                let v = gd[(plane * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as Real;
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        dst[r * w + cc] += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MaxPool { x, argmax } => {
            if rg(*x) {
                let sx = val(*x).shape();
                accumulate_with(&mut grads[*x], sx, |d| {
                    for (o, &at) in argmax.iter().enumerate() {
                        d[at] += g.data()[o];
                    }
                });
            }
        }
        Op::Reshape { x } => {
            if rg(*x) {
                let shape = val(*x).shape();
                accumulate(&mut grads[*x], g.reshape(shape)?);
            }
        }
        Op::Concat { xs, axis } => {
            let shape = g.shape().to_vec();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[*axis + 1..]);
            let total_block = shape[*axis] * inner;
            let mut offset = 0;
            for &v in xs {
                let sv = val(v).shape();
                let block = sv[*axis] * inner;
                if rg(v) {
                    accumulate_with(&mut grads[v], sv, |d| {
                        for o in 0..outer {
                            let src = &g.data()[o * total_block + offset..o * total_block + offset + block];
                            for (a, b) in d[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *a += *b;
                            }
                        }
                    });
                }
                offset += block;
            }
        }
        Op::SliceCols { x, start } => {
            if rg(*x) {
                let sx = val(*x).shape();
                let (n, c) = (sx[0], sx[1]);
                let width = g.shape()[1];
                accumulate_with(&mut grads[*x], sx, |d| {
                    for r in 0..n {
                        for j in 0..width {
                            d[r * c + start + j] += g.data()[r * width + j];
                        }
                    }
                });
            }
        }
        Op::Sum { x } => {
            if rg(*x) {
                let gv = g.data()[0];
                accumulate(&mut grads[*x], Tensor::full(val(*x).shape(), gv));
            }
        }
        Op::Mean { x } => {
            if rg(*x) {
                let t = val(*x);
                let gv = g.data()[0] / t.len().max(1) as Real;
                accumulate(&mut grads[*x], Tensor::full(t.shape(), gv));
            }
        }
        Op::CrossEntropy { logits, probs, labels } => {
            if rg(*logits) {
                let s = val(*logits).shape();
                let (n, c) = (s[0], s[1]);
                let k = g.data()[0] / n.max(1) as Real;
                accumulate_with(&mut grads[*logits], s, |d| {
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            d[r * c + j] += k * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
        Op::SoftCrossEntropy { logits, probs, target } => {
            if rg(*logits) {
                let s = val(*logits).shape();
                let (n, c) = (s[0], s[1]);
                let k = g.data()[0] / n.max(1) as Real;
                let p = target.data();
                accumulate_with(&mut grads[*logits], s, |d| {
                    for r in 0..n {
                        let mass: Real = p[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            d[r * c + j] += k * (probs[r * c + j] * mass - p[r * c + j]);
                        }
                    }
                });
            }
        }
    }
    Ok(())
}
