//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every op pushes one node and one value; node ids are indices into the
//! tape, so reverse iteration order is a valid topological order for the
//! backward sweep. Graphs are rebuilt for every forward pass (define-by-run),
//! which keeps control flow (dropout decisions, per-image loops) out of the
//! engine entirely.

use super::{
    broadcast_shape, broadcast_strides, reduce_grad_to_shape, strides_of, zip_broadcast, Result,
    Tensor, TensorError,
};

/// Handle to a value on a [`Graph`]. Plain index, cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValId(usize);

impl ValId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Reduction flavor for [`Graph::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Node {
    Leaf,
    Add { a: ValId, b: ValId },
    Sub { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Relu { x: ValId },
    Sigmoid { x: ValId },
    Log { x: ValId },
    Neg { x: ValId },
    Clamp { x: ValId, lo: f64, hi: f64 },
    MatMul { a: ValId, b: ValId },
    Softmax { x: ValId, axis: usize },
    LogSoftmax { x: ValId, axis: usize },
    LayerNorm { x: ValId, mean: Vec<f64>, inv: Vec<f64> },
    Conv2d { x: ValId, w: ValId, stride: usize, pad: usize },
    MaxPool2d { x: ValId, argmax: Vec<usize> },
    Reduce { x: ValId, axes: Vec<usize>, kind: ReduceKind, argmax: Vec<usize> },
    Reshape { x: ValId },
    BatchSelect { x: ValId, n: usize },
    RoiPool { x: ValId, argmax: Vec<isize> },
}

/// Reverse-mode tape. See module docs.
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    needs: Vec<bool>,
    backward_run: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), values: Vec::new(), needs: Vec::new(), backward_run: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, value: Tensor, needs: bool) -> ValId {
        self.nodes.push(node);
        self.values.push(value);
        self.needs.push(needs);
        ValId(self.nodes.len() - 1)
    }

    /// Put a tensor on the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> ValId {
        let needs = t.requires_grad;
        self.push(Node::Leaf, t, needs)
    }

    /// Put a tensor on the tape as a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor) -> ValId {
        t.requires_grad = false;
        self.push(Node::Leaf, t, false)
    }

    /// Rank-0 constant.
    pub fn scalar_const(&mut self, v: f64) -> ValId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn data(&self, id: ValId) -> &[f64] {
        self.values[id.0].data()
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        self.values[id.0].shape()
    }

    /// Gradient buffer of a leaf, once `backward` has run.
    pub fn grad(&self, id: ValId) -> Option<&[f64]> {
        self.values[id.0].grad.as_deref()
    }

    // ---- elementwise binary (broadcasting) -------------------------------

    fn binary(&mut self, a: ValId, b: ValId, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        zip_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Ok((out_shape, out))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (shape, data) = self.binary(a, b, |x, y| x + y)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Node::Add { a, b }, Tensor::from_vec(shape, data)?, needs))
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (shape, data) = self.binary(a, b, |x, y| x - y)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Node::Sub { a, b }, Tensor::from_vec(shape, data)?, needs))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (shape, data) = self.binary(a, b, |x, y| x * y)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Node::Mul { a, b }, Tensor::from_vec(shape, data)?, needs))
    }

    /// `x + c` with a scalar constant.
    pub fn add_scalar(&mut self, x: ValId, c: f64) -> ValId {
        let k = self.scalar_const(c);
        self.add(x, k).expect("scalar broadcasts with anything")
    }

    /// `x * c` with a scalar constant.
    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let k = self.scalar_const(c);
        self.mul(x, k).expect("scalar broadcasts with anything")
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, x: ValId, node: Node, f: impl Fn(f64) -> f64) -> ValId {
        let t = &self.values[x.0];
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor { shape: t.shape().to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs[x.0];
        self.push(node, out, needs)
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        self.unary(x, Node::Relu { x }, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: ValId) -> ValId {
        self.unary(x, Node::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn neg(&mut self, x: ValId) -> ValId {
        self.unary(x, Node::Neg { x }, |v| -v)
    }

    pub fn clamp(&mut self, x: ValId, lo: f64, hi: f64) -> ValId {
        self.unary(x, Node::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Natural log; rejects non-positive inputs rather than producing -inf.
    pub fn log(&mut self, x: ValId) -> Result<ValId> {
        if let Some(&bad) = self.values[x.0].data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        Ok(self.unary(x, Node::Log { x }, f64::ln))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(TensorError::InvalidShape(format!(
                "matmul needs rank-2 operands, got {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::InnerDimMismatch { a: ta.shape().to_vec(), b: tb.shape().to_vec() });
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Node::MatMul { a, b }, Tensor::from_vec(vec![m, n], out)?, needs))
    }

    // ---- normalizations ----------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: ValId, axis: usize) -> Result<ValId> {
        let t = &self.values[x.0];
        let rank = t.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis { axis, rank });
        }
        let extent = t.shape()[axis];
        if extent == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let mut out = vec![0.0; t.numel()];
        let d = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for e in 0..extent {
                    mx = mx.max(d[base + e * inner]);
                }
                let mut sum = 0.0;
                for e in 0..extent {
                    let v = (d[base + e * inner] - mx).exp();
                    out[base + e * inner] = v;
                    sum += v;
                }
                for e in 0..extent {
                    out[base + e * inner] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs[x.0];
        Ok(self.push(Node::Softmax { x, axis }, Tensor::from_vec(shape, out)?, needs))
    }

    /// `log(softmax(x, axis))` computed directly from the logits. Unlike
    /// composing softmax with [`Graph::log`], this stays finite (and keeps a
    /// live gradient) however small the underlying probability gets.
    pub fn log_softmax(&mut self, x: ValId, axis: usize) -> Result<ValId> {
        let t = &self.values[x.0];
        let rank = t.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis { axis, rank });
        }
        let extent = t.shape()[axis];
        if extent == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let mut out = vec![0.0; t.numel()];
        let d = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for e in 0..extent {
                    mx = mx.max(d[base + e * inner]);
                }
                let mut sum = 0.0;
                for e in 0..extent {
                    sum += (d[base + e * inner] - mx).exp();
                }
                let lse = mx + sum.ln();
                for e in 0..extent {
                    out[base + e * inner] = d[base + e * inner] - lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs[x.0];
        Ok(self.push(Node::LogSoftmax { x, axis }, Tensor::from_vec(shape, out)?, needs))
    }

    /// Layer normalization over the last axis, no learned affine part.
    pub fn layer_norm(&mut self, x: ValId, eps: f64) -> Result<ValId> {
        let t = &self.values[x.0];
        let rank = t.rank();
        if rank == 0 {
            return Err(TensorError::InvalidShape("layer_norm needs rank >= 1".into()));
        }
        let extent = t.shape()[rank - 1];
        if extent == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let lanes = t.numel() / extent;
        let d = t.data();
        let mut out = vec![0.0; t.numel()];
        let mut means = vec![0.0; lanes];
        let mut invs = vec![0.0; lanes];
        for l in 0..lanes {
            let row = &d[l * extent..(l + 1) * extent];
            let mean = row.iter().sum::<f64>() / extent as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / extent as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[l] = mean;
            invs[l] = inv;
            for e in 0..extent {
                out[l * extent + e] = (row[e] - mean) * inv;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs[x.0];
        Ok(self.push(Node::LayerNorm { x, mean: means, inv: invs }, Tensor::from_vec(shape, out)?, needs))
    }

    // ---- spatial ops -------------------------------------------------------

    /// 2-D convolution, zero padding. `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: ValId, w: ValId, stride: usize, pad: usize) -> Result<ValId> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(TensorError::InvalidShape(format!(
                "conv2d needs rank-4 input and kernel, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, cik, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if ci != cik {
            return Err(TensorError::ChannelMismatch { input: ci, kernel: cik });
        }
        if stride == 0 || kh != kw || kh == 0 {
            return Err(TensorError::InvalidShape("conv2d needs square kernel and stride >= 1".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidShape("conv2d kernel larger than padded input".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        let (dx, dw) = (tx.data(), tw.data());
        for b in 0..n {
            for oc in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            let xi_base = (b * ci + ic) * h * wd;
                            let wi_base = (oc * ci + ic) * kh * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += dx[xi_base + iy as usize * wd + ix as usize]
                                        * dw[wi_base + ky * kw + kx];
                                }
                            }
                        }
                        out[((b * co + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let needs = self.needs[x.0] || self.needs[w.0];
        Ok(self.push(Node::Conv2d { x, w, stride, pad }, Tensor::from_vec(vec![n, co, oh, ow], out)?, needs))
    }

    /// Max pooling with square window `k` and the same stride. Ties go to the
    /// first element in scan order, so pooling is deterministic.
    pub fn maxpool2d(&mut self, x: ValId, k: usize, stride: usize) -> Result<ValId> {
        let t = &self.values[x.0];
        if t.rank() != 4 {
            return Err(TensorError::InvalidShape(format!("maxpool2d needs rank-4 input, got {:?}", t.shape())));
        }
        if k == 0 || stride == 0 {
            return Err(TensorError::InvalidShape("maxpool2d needs k >= 1 and stride >= 1".into()));
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        if h < k || w < k {
            return Err(TensorError::InvalidShape("maxpool2d window larger than input".into()));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let d = t.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                let plane = (b * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = plane + (oy * stride + ky) * w + (ox * stride + kx);
                                if d[idx] > best {
                                    best = d[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        let o = ((b * c + ch) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(Node::MaxPool2d { x, argmax }, Tensor::from_vec(vec![n, c, oh, ow], out)?, needs))
    }

    /// Max-pool fixed regions of one feature map into `[R, D, p, p]`.
    ///
    /// `x: [1, D, H, W]`; boxes are `(x1, y1, x2, y2)` in input-image pixels,
    /// mapped to feature cells by `spatial_scale`. Empty bins yield 0 and get
    /// no gradient.
    pub fn roi_pool(&mut self, x: ValId, boxes: &[[f64; 4]], spatial_scale: f64, p: usize) -> Result<ValId> {
        let t = &self.values[x.0];
        if t.rank() != 4 || t.shape()[0] != 1 {
            return Err(TensorError::InvalidShape(format!("roi_pool needs [1,D,H,W] input, got {:?}", t.shape())));
        }
        if p == 0 || !(spatial_scale > 0.0) {
            return Err(TensorError::InvalidShape("roi_pool needs p >= 1 and positive scale".into()));
        }
        let (dch, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let r = boxes.len();
        let d = t.data();
        let mut out = vec![0.0; r * dch * p * p];
        let mut argmax = vec![-1isize; r * dch * p * p];
        for (ri, bx) in boxes.iter().enumerate() {
            // Snap the box outward onto the feature grid, then clamp inside.
            let x1 = ((bx[0] * spatial_scale).floor() as isize).clamp(0, w as isize - 1) as usize;
            let y1 = ((bx[1] * spatial_scale).floor() as isize).clamp(0, h as isize - 1) as usize;
            let x2 = ((bx[2] * spatial_scale).ceil() as isize).clamp(x1 as isize + 1, w as isize) as usize;
            let y2 = ((bx[3] * spatial_scale).ceil() as isize).clamp(y1 as isize + 1, h as isize) as usize;
            let (rw, rh) = (x2 - x1, y2 - y1);
            for ch in 0..dch {
                let plane = ch * h * w;
                for py in 0..p {
                    let ys = y1 + py * rh / p;
                    let ye = y1 + ((py + 1) * rh).div_ceil(p);
                    for px in 0..p {
                        let xs = x1 + px * rw / p;
                        let xe = x1 + ((px + 1) * rw).div_ceil(p);
                        let o = ((ri * dch + ch) * p + py) * p + px;
                        if ye <= ys || xe <= xs {
                            continue; // empty bin: stays 0 / -1
                        }
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for yy in ys..ye.min(h) {
                            for xx in xs..xe.min(w) {
                                let idx = plane + yy * w + xx;
                                if d[idx] > best {
                                    best = d[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_i as isize;
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(Node::RoiPool { x, argmax }, Tensor::from_vec(vec![r, dch, p, p], out)?, needs))
    }

    // ---- shape ops ---------------------------------------------------------

    /// Reinterpret the value under a new shape with the same element count.
    pub fn reshape(&mut self, x: ValId, new_shape: Vec<usize>) -> Result<ValId> {
        let t = &self.values[x.0];
        if new_shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::ShapeDataMismatch { shape: new_shape, len: t.numel() });
        }
        let out = Tensor { shape: new_shape, data: t.data().to_vec(), requires_grad: false, grad: None };
        let needs = self.needs[x.0];
        Ok(self.push(Node::Reshape { x }, out, needs))
    }

    /// Slice one item from the leading (batch) axis, keeping rank: `[N,...] -> [1,...]`.
    pub fn batch_select(&mut self, x: ValId, n: usize) -> Result<ValId> {
        let t = &self.values[x.0];
        if t.rank() == 0 || n >= t.shape()[0] {
            return Err(TensorError::InvalidShape(format!(
                "batch_select index {} out of range for shape {:?}",
                n,
                t.shape()
            )));
        }
        let per = t.numel() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let data = t.data()[n * per..(n + 1) * per].to_vec();
        let needs = self.needs[x.0];
        Ok(self.push(Node::BatchSelect { x, n }, Tensor::from_vec(shape, data)?, needs))
    }

    // ---- reductions ----------------------------------------------------------

    /// Reduce over `axes` (strictly increasing, in range). `keepdims` keeps
    /// reduced extents as 1. `Max` remembers argmax positions for backward;
    /// ties go to the lowest linear index.
    pub fn reduce(&mut self, x: ValId, axes: &[usize], kind: ReduceKind, keepdims: bool) -> Result<ValId> {
        let t = &self.values[x.0];
        let rank = t.rank();
        if axes.is_empty() {
            // Reduction over no axes is the identity.
            let shape = t.shape().to_vec();
            return self.reshape(x, shape);
        }
        for (i, &a) in axes.iter().enumerate() {
            if a >= rank {
                return Err(TensorError::BadAxis { axis: a, rank });
            }
            if i > 0 && axes[i - 1] >= a {
                return Err(TensorError::InvalidShape("reduce axes must be strictly increasing".into()));
            }
        }
        let mut reduced = vec![false; rank];
        let mut extent = 1usize;
        for &a in axes {
            reduced[a] = true;
            extent *= t.shape()[a];
        }
        if extent == 0 {
            return Err(TensorError::EmptyReduction);
        }
        // keepdims shape of the output, used for index mapping.
        let kd_shape: Vec<usize> =
            t.shape().iter().enumerate().map(|(i, &e)| if reduced[i] { 1 } else { e }).collect();
        let out_numel: usize = kd_shape.iter().product();
        let in_strides = strides_of(t.shape());
        let out_strides = strides_of(&kd_shape);
        let d = t.data();

        let mut out = match kind {
            ReduceKind::Max => vec![f64::NEG_INFINITY; out_numel],
            _ => vec![0.0; out_numel],
        };
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0usize; out_numel];
        }
        // Walk input once; map each element to its output cell.
        let mut coords = vec![0usize; rank];
        for (ii, &v) in d.iter().enumerate() {
            let mut oi = 0usize;
            for (dim, &c) in coords.iter().enumerate() {
                if !reduced[dim] {
                    oi += c * out_strides[dim];
                }
            }
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[oi] += v,
                ReduceKind::Max => {
                    if v > out[oi] {
                        out[oi] = v;
                        argmax[oi] = ii;
                    }
                }
            }
            for dim in (0..rank).rev() {
                coords[dim] += 1;
                if coords[dim] < t.shape()[dim] {
                    break;
                }
                coords[dim] = 0;
            }
        }
        let _ = in_strides;
        if kind == ReduceKind::Mean {
            for v in &mut out {
                *v /= extent as f64;
            }
        }
        let final_shape: Vec<usize> = if keepdims {
            kd_shape
        } else {
            t.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduced[*i])
                .map(|(_, &e)| e)
                .collect()
        };
        let needs = self.needs[x.0];
        Ok(self.push(
            Node::Reduce { x, axes: axes.to_vec(), kind, argmax },
            Tensor::from_vec(final_shape, out)?,
            needs,
        ))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum_all(&mut self, x: ValId) -> Result<ValId> {
        let axes: Vec<usize> = (0..self.values[x.0].rank()).collect();
        if axes.is_empty() {
            // already rank-0: reshaping is a cheap identity
            return self.reshape(x, vec![]);
        }
        self.reduce(x, &axes, ReduceKind::Sum, false)
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean_all(&mut self, x: ValId) -> Result<ValId> {
        let axes: Vec<usize> = (0..self.values[x.0].rank()).collect();
        if axes.is_empty() {
            return self.reshape(x, vec![]);
        }
        self.reduce(x, &axes, ReduceKind::Mean, false)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every leaf
    /// that requires grad (zeros if unreachable). One call per graph.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.backward_run {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let numel = self.values[loss.0].numel();
        if numel != 1 {
            return Err(TensorError::NotScalarLoss { numel });
        }
        self.backward_run = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.needs[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            if let Node::Leaf = self.nodes[i] {
                if self.values[i].requires_grad {
                    self.values[i].grad = Some(g);
                }
            }
        }
        // Leaves never reached still get a zero grad buffer.
        for i in 0..n {
            if matches!(self.nodes[i], Node::Leaf) && self.values[i].requires_grad && self.values[i].grad.is_none() {
                self.values[i].grad = Some(vec![0.0; self.values[i].numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: ValId, delta: &[f64]) {
        if !self.needs[id.0] {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = self.values[i].shape().to_vec();
        match &self.nodes[i] {
            Node::Leaf => {}
            Node::Add { a, b } => {
                let ga = reduce_grad_to_shape(g, &out_shape, self.values[a.0].shape());
                self.accumulate(grads, *a, &ga);
                let gb = reduce_grad_to_shape(g, &out_shape, self.values[b.0].shape());
                self.accumulate(grads, *b, &gb);
            }
            Node::Sub { a, b } => {
                let ga = reduce_grad_to_shape(g, &out_shape, self.values[a.0].shape());
                self.accumulate(grads, *a, &ga);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                let gb = reduce_grad_to_shape(&neg, &out_shape, self.values[b.0].shape());
                self.accumulate(grads, *b, &gb);
            }
            Node::Mul { a, b } => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let sa = broadcast_strides(ta.shape(), &out_shape);
                let sb = broadcast_strides(tb.shape(), &out_shape);
                if self.needs[a.0] {
                    let mut full = vec![0.0; g.len()];
                    let db = tb.data();
                    zip_broadcast(&out_shape, &sa, &sb, |o, _, ib| full[o] = g[o] * db[ib]);
                    let ga = reduce_grad_to_shape(&full, &out_shape, ta.shape());
                    self.accumulate(grads, *a, &ga);
                }
                if self.needs[b.0] {
                    let mut full = vec![0.0; g.len()];
                    let da = ta.data();
                    zip_broadcast(&out_shape, &sa, &sb, |o, ia, _| full[o] = g[o] * da[ia]);
                    let gb = reduce_grad_to_shape(&full, &out_shape, tb.shape());
                    self.accumulate(grads, *b, &gb);
                }
            }
            Node::Relu { x } => {
                let d = self.values[x.0].data();
                let gx: Vec<f64> = g.iter().zip(d).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                self.accumulate(grads, *x, &gx);
            }
            Node::Sigmoid { x } => {
                let y = self.values[i].data();
                let gx: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(grads, *x, &gx);
            }
            Node::Log { x } => {
                let d = self.values[x.0].data();
                let gx: Vec<f64> = g.iter().zip(d).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(grads, *x, &gx);
            }
            Node::Neg { x } => {
                let gx: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *x, &gx);
            }
            Node::Clamp { x, lo, hi } => {
                let d = self.values[x.0].data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(d)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &gx);
            }
            Node::MatMul { a, b } => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs[a.0] {
                    // dA = G * B^T
                    let mut ga = vec![0.0; m * k];
                    let db = tb.data();
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = g[i2 * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i2 * k + p] += gv * db[p * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *a, &ga);
                }
                if self.needs[b.0] {
                    // dB = A^T * G
                    let mut gb = vec![0.0; k * n];
                    let da = ta.data();
                    for i2 in 0..m {
                        for p in 0..k {
                            let av = da[i2 * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i2 * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, &gb);
                }
            }
            Node::Softmax { x, axis } => {
                let y = self.values[i].data();
                let shape = self.values[i].shape();
                let extent = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for inr in 0..inner {
                        let base = o * extent * inner + inr;
                        let mut dot = 0.0;
                        for e in 0..extent {
                            let idx = base + e * inner;
                            dot += g[idx] * y[idx];
                        }
                        for e in 0..extent {
                            let idx = base + e * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Node::LogSoftmax { x, axis } => {
                let y = self.values[i].data();
                let shape = self.values[i].shape();
                let extent = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for inr in 0..inner {
                        let base = o * extent * inner + inr;
                        let mut gsum = 0.0;
                        for e in 0..extent {
                            gsum += g[base + e * inner];
                        }
                        for e in 0..extent {
                            let idx = base + e * inner;
                            gx[idx] = g[idx] - y[idx].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Node::LayerNorm { x, mean, inv } => {
                let t = &self.values[x.0];
                let extent = t.shape()[t.rank() - 1];
                let lanes = t.numel() / extent;
                let d = t.data();
                let mut gx = vec![0.0; g.len()];
                for l in 0..lanes {
                    let (m, iv) = (mean[l], inv[l]);
                    let row = &d[l * extent..(l + 1) * extent];
                    let grow = &g[l * extent..(l + 1) * extent];
                    let mut mean_g = 0.0;
                    let mut mean_gy = 0.0;
                    for e in 0..extent {
                        let yhat = (row[e] - m) * iv;
                        mean_g += grow[e];
                        mean_gy += grow[e] * yhat;
                    }
                    mean_g /= extent as f64;
                    mean_gy /= extent as f64;
                    for e in 0..extent {
                        let yhat = (row[e] - m) * iv;
                        gx[l * extent + e] = iv * (grow[e] - mean_g - yhat * mean_gy);
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Node::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
                let (n, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (co, _, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (self.values[i].shape()[2], self.values[i].shape()[3]);
                let (dx, dw) = (tx.data(), tw.data());
                let need_x = self.needs[x.0];
                let need_w = self.needs[w.0];
                let mut gx = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; tw.numel()] } else { Vec::new() };
                for b in 0..n {
                    for oc in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((b * co + oc) * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    let xi_base = (b * ci + ic) * h * wd;
                                    let wi_base = (oc * ci + ic) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = xi_base + iy as usize * wd + ix as usize;
                                            let wi = wi_base + ky * kw + kx;
                                            if need_x {
                                                gx[xi] += gv * dw[wi];
                                            }
                                            if need_w {
                                                gw[wi] += gv * dx[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, &gx);
                }
                if need_w {
                    self.accumulate(grads, *w, &gw);
                }
            }
            Node::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; self.values[x.0].numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                self.accumulate(grads, *x, &gx);
            }
            Node::RoiPool { x, argmax } => {
                let mut gx = vec![0.0; self.values[x.0].numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    if src >= 0 {
                        gx[src as usize] += g[o];
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Node::Reduce { x, axes, kind, argmax } => {
                let t = &self.values[x.0];
                let rank = t.rank();
                let mut reduced = vec![false; rank];
                let mut extent = 1usize;
                for &a in axes {
                    reduced[a] = true;
                    extent *= t.shape()[a];
                }
                let kd_shape: Vec<usize> =
                    t.shape().iter().enumerate().map(|(i2, &e)| if reduced[i2] { 1 } else { e }).collect();
                let out_strides = strides_of(&kd_shape);
                let mut gx = vec![0.0; t.numel()];
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let scale = if *kind == ReduceKind::Mean { 1.0 / extent as f64 } else { 1.0 };
                        let mut coords = vec![0usize; rank];
                        for gxi in gx.iter_mut() {
                            let mut oi = 0usize;
                            for (dim, &c) in coords.iter().enumerate() {
                                if !reduced[dim] {
                                    oi += c * out_strides[dim];
                                }
                            }
                            *gxi = g[oi] * scale;
                            for dim in (0..rank).rev() {
                                coords[dim] += 1;
                                if coords[dim] < t.shape()[dim] {
                                    break;
                                }
                                coords[dim] = 0;
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += g[o];
                        }
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Node::Reshape { x } => {
                self.accumulate(grads, *x, g);
            }
            Node::BatchSelect { x, n } => {
                let t = &self.values[x.0];
                let per = t.numel() / t.shape()[0];
                let mut gx = vec![0.0; t.numel()];
                gx[n * per..(n + 1) * per].copy_from_slice(g);
                self.accumulate(grads, *x, &gx);
            }
        }
    }
}
