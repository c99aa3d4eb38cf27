//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every builder method evaluates its op eagerly, records it on the tape and
//! returns a [`NodeId`]. [`Graph::backward`] walks the tape in reverse from a
//! scalar node and returns gradients for every node that depends on a
//! trainable leaf.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{col2im, im2col, map_indices, max_pool, ConvGeom};
use crate::tensor::{matmul, Real, Tensor};

/// Instance normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    InstanceNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Scale(NodeId, T),
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    SoftmaxRows(NodeId),
    Spp {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MeanAbsDiff(NodeId, NodeId),
    MeanSqOffset(NodeId, T),
    WeightedSum(Vec<(NodeId, T)>),
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

/// Per-sample (weight, bias) gradient partials of a convolution.
type SampleGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn t_from_usize<T: Real>(n: usize) -> T {
    T::from_f64(n as f64)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf: gradients are not tracked through it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient when `trainable`.
    pub fn param(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, geom) = match *self.value(w).shape() {
            [co, wci, k, k2] if k == k2 => {
                if wci != ci {
                    return Err(Error::shape("conv2d input channels", wci, ci));
                }
                let g = ConvGeom::new(ci, h, wd, k, stride, pad)
                    .ok_or_else(|| Error::shape("conv2d spatial size", format!(">= kernel {k}"), format!("{h}x{wd}")))?;
                (co, g)
            }
            ref s => return Err(Error::shape("conv2d weight", "[Co, Ci, k, k]", format!("{s:?}"))),
        };
        check_bias(self, b, co)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let in_len = ci * h * wd;
        let cols = geom.col_cols();
        let per_sample = map_indices(n, |s| {
            let xs = &xv[s * in_len..(s + 1) * in_len];
            let mut out = vec![T::zero(); co * cols];
            if geom.is_pointwise() {
                matmul(wv, false, xs, false, &mut out, co, ci, cols, false);
            } else {
                let mut col = vec![T::zero(); geom.col_rows() * cols];
                im2col(xs, &geom, &mut col);
                matmul(wv, false, &col, false, &mut out, co, geom.col_rows(), cols, false);
            }
            if let Some(bv) = bv {
                add_channel_bias(&mut out, bv, cols);
            }
            out
        });
        let value = Tensor::from_vec(&[n, co, geom.out_h, geom.out_w], per_sample.concat())?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Transposed convolution; `w` is `[C_in, C_out, k, k]`. The output size
    /// is `(H-1)·stride - 2·pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let (n, ci, hi, wi) = self.value(x).dims4()?;
        let (co, k) = match *self.value(w).shape() {
            [wci, co, k, k2] if k == k2 => {
                if wci != ci {
                    return Err(Error::shape("conv_transpose2d input channels", wci, ci));
                }
                (co, k)
            }
            ref s => return Err(Error::shape("conv_transpose2d weight", "[Ci, Co, k, k]", format!("{s:?}"))),
        };
        if out_pad >= stride.max(1) {
            return Err(Error::InvalidConfig(format!("output padding {out_pad} must be below stride {stride}")));
        }
        let ho = ((hi - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d output", "positive size", "negative"))?;
        let wo = ((wi - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d output", "positive size", "negative"))?;
        let geom = ConvGeom::new(co, ho, wo, k, stride, pad)
            .filter(|g| g.out_h == hi && g.out_w == wi)
            .ok_or_else(|| Error::shape("conv_transpose2d geometry", format!("{hi}x{wi}"), format!("{ho}x{wo}")))?;
        check_bias(self, b, co)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let in_len = ci * hi * wi;
        let rows = geom.col_rows();
        let cols = geom.col_cols();
        let per_sample = map_indices(n, |s| {
            let xs = &xv[s * in_len..(s + 1) * in_len];
            let mut col = vec![T::zero(); rows * cols];
            matmul(wv, true, xs, false, &mut col, rows, ci, cols, false);
            let mut out = vec![T::zero(); co * ho * wo];
            col2im(&col, &geom, &mut out);
            if let Some(bv) = bv {
                add_channel_bias(&mut out, bv, ho * wo);
            }
            out
        });
        let value = Tensor::from_vec(&[n, co, ho, wo], per_sample.concat())?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, needs))
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let geom = ConvGeom::new(c, h, w, kernel, stride, pad)
            .ok_or_else(|| Error::shape("max_pool2d spatial size", format!(">= kernel {kernel}"), format!("{h}x{w}")))?;
        let xv = self.value(x).data();
        let len = c * h * w;
        let per_sample = map_indices(n, |s| max_pool(&xv[s * len..(s + 1) * len], &geom));
        let mut data = Vec::with_capacity(n * c * geom.out_h * geom.out_w);
        let mut argmax = Vec::with_capacity(data.capacity());
        for (v, a) in per_sample {
            data.extend(v);
            argmax.extend(a);
        }
        let value = Tensor::from_vec(&[n, c, geom.out_h, geom.out_w], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// Per-sample, per-channel normalization over the spatial axes followed
    /// by a per-channel affine map.
    pub fn instance_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, p) in [("scale", scale), ("shift", shift)] {
            if self.value(p).len() != c {
                return Err(Error::shape(format!("instance_norm {name}"), c, self.value(p).len()));
            }
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(scale).data();
        let bv = self.value(shift).data();
        let eps = T::from_f64(NORM_EPS);
        let m = t_from_usize::<T>(hw);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let ch = plane % c;
            let src = &xv[plane * hw..(plane + 1) * hw];
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            for i in 0..hw {
                let xh = (src[i] - mean) * is;
                xhat[plane * hw + i] = xh;
                out[plane * hw + i] = gv[ch] * xh + bv[ch];
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu(x, s), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?}", va.shape()), format!("{:?}", vb.shape())));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat", "rank >= 2", base.len()));
        }
        let batch = base[0];
        let inner: usize = base[2..].iter().product();
        let mut total_c = 0;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != base.len() || s[0] != batch || s[2..] != base[2..] {
                return Err(Error::shape("concat", format!("{base:?} (except axis 1)"), format!("{s:?}")));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(batch * total_c * inner);
        for s in 0..batch {
            for &id in xs {
                let v = self.value(id);
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = base.clone();
        shape[1] = total_c;
        let value = Tensor::from_vec(&shape, data)?;
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(value, Op::Concat(xs.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Batched product of `[B, ·, ·]` tensors with optional transposes.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ba, ra, ca) = dims3(self.value(a))?;
        let (bb, rb, cb) = dims3(self.value(b))?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != kb {
            return Err(Error::shape(
                "batch_matmul",
                format!("batch {ba}, inner {k}"),
                format!("batch {bb}, inner {kb}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); ba * m * n];
        for s in 0..ba {
            matmul(
                &av[s * m * k..(s + 1) * m * k],
                ta,
                &bv[s * k * n..(s + 1) * k * n],
                tb,
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let value = Tensor::from_vec(&[ba, m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::BatchMatMul { a, b, ta, tb }, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, f), needs)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar factor", 1, self.value(s).len()));
        }
        let f = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * f);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::MulScalar { x, s }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let cols = *v.shape().last().ok_or_else(|| Error::shape("softmax", "rank >= 1", 0))?;
        let mut out = v.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::from_vec(v.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), needs))
    }

    /// Spatial pyramid max pooling: `[N, C, H, W]` to `[N, C·Σ level²]`.
    pub fn spp(&mut self, x: NodeId, levels: &[usize]) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let max_level = levels.iter().copied().max().unwrap_or(0);
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::InvalidConfig("pyramid levels must be non-empty and positive".into()));
        }
        if h < max_level || w < max_level {
            return Err(Error::shape("spp input", format!("side >= {max_level}"), format!("{h}x{w}")));
        }
        let bins: usize = levels.iter().map(|l| l * l).sum();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * bins);
        let mut argmax = Vec::with_capacity(n * c * bins);
        for s in 0..n {
            for &l in levels {
                for ch in 0..c {
                    let base = (s * c + ch) * h * w;
                    for i in 0..l {
                        let (r0, r1) = (i * h / l, (i + 1) * h / l);
                        for j in 0..l {
                            let (c0, c1) = (j * w / l, (j + 1) * w / l);
                            let mut best = base + r0 * w + c0;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    let idx = base + r * w + cc;
                                    if xv[idx] > xv[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(xv[best]);
                            argmax.push(best);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c * bins], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Spp { x, argmax }, needs))
    }

    /// Fully connected layer: `x` is `[N, in]`, `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, fin) = dims2(self.value(x))?;
        let (fout, win) = dims2(self.value(w))?;
        if win != fin {
            return Err(Error::shape("linear input features", win, fin));
        }
        check_bias(self, b, fout)?;
        let mut out = vec![T::zero(); n * fout];
        matmul(self.value(x).data(), false, self.value(w).data(), true, &mut out, n, fin, fout, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::from_vec(&[n, fout], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// `mean(|a - b|)` as a one-element tensor.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mean_abs_diff", format!("{:?}", va.shape()), format!("{:?}", vb.shape())));
        }
        if va.is_empty() {
            return Err(Error::InvalidInput("mean over an empty tensor".into()));
        }
        let sum: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(sum / t_from_usize(va.len()));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MeanAbsDiff(a, b), needs))
    }

    /// `mean((x - target)²)` as a one-element tensor.
    pub fn mean_sq_offset(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::InvalidInput("mean over an empty tensor".into()));
        }
        let t = T::from_f64(target);
        let sum: T = v.data().iter().map(|&e| (e - t) * (e - t)).sum();
        let value = Tensor::scalar(sum / t_from_usize(v.len()));
        let needs = self.needs(x);
        Ok(self.push(value, Op::MeanSqOffset(x, t), needs))
    }

    /// `Σ weight · term` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = T::zero();
        let mut stored = Vec::with_capacity(terms.len());
        for &(id, wt) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::shape("weighted_sum term", 1, v.len()));
            }
            let w = T::from_f64(wt);
            total += w * v.data()[0];
            stored.push((id, w));
        }
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(stored), needs))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, k) = dims2(self.value(logits))?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape("cross entropy targets", n, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidInput(format!("class index {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / t_from_usize(n));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Reverse pass from the one-element node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward root", "one element", self.value(loss).len()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: NodeId) -> Option<&'g mut Tensor<T>> {
        if !self.needs(id) {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        slot.as_mut()
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => self.backprop_conv(*x, *w, *b, *stride, *pad, gy, grads),
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                self.backprop_conv_transpose(*x, *w, *b, *stride, *pad, gy, grads)
            }
            Op::MaxPool { x, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("pool input is 4-D");
                let plane_out = gy.len() / (n * c);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dx = dx.data_mut();
                    for plane in 0..n * c {
                        for o in 0..plane_out {
                            let i = plane * plane_out + o;
                            dx[plane * h * w + argmax[i] as usize] += g[i];
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("norm input is 4-D");
                let hw = h * w;
                let gamma = self.value(*scale).data();
                let m = t_from_usize::<T>(hw);
                if let Some(dg) = self.grad_buf(grads, *scale) {
                    let dg = dg.data_mut();
                    for plane in 0..n * c {
                        let r = plane * hw..(plane + 1) * hw;
                        dg[plane % c] += g[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                if let Some(db) = self.grad_buf(grads, *shift) {
                    let db = db.data_mut();
                    for plane in 0..n * c {
                        db[plane % c] += g[plane * hw..(plane + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dx = dx.data_mut();
                    for plane in 0..n * c {
                        let r = plane * hw..(plane + 1) * hw;
                        let gam = gamma[plane % c];
                        let gs = &g[r.clone()];
                        let xs = &xhat[r.clone()];
                        let sum1: T = gs.iter().map(|&v| v * gam).sum();
                        let sum2: T = gs.iter().zip(xs).map(|(&v, &xh)| v * gam * xh).sum();
                        let k = inv_std[plane] / m;
                        for (i, d) in dx[r].iter_mut().enumerate() {
                            *d += k * (m * gs[i] * gam - sum1 - xs[i] * sum2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &v), &gg) in dx.data_mut().iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &v), &gg) in dx.data_mut().iter_mut().zip(xv).zip(g) {
                        *d += if v > T::zero() { gg } else { gg * *s };
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, &y), &gg) in dx.data_mut().iter_mut().zip(yv).zip(g) {
                        *d += gg * (T::one() - y * y);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, id) {
                        d.add_assign(gy);
                    }
                }
            }
            Op::Concat(xs) => {
                let shape = gy.shape();
                let batch = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &id in xs {
                    let block = self.value(id).shape()[1] * inner;
                    if let Some(d) = self.grad_buf(grads, id) {
                        let d = d.data_mut();
                        for s in 0..batch {
                            let src = &g[s * total + offset..s * total + offset + block];
                            for (a, &b) in d[s * block..(s + 1) * block].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (a, &b) in d.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (ba, ra, ca) = dims3(self.value(*a)).expect("3-D");
                let (_, rb, cb) = dims3(self.value(*b)).expect("3-D");
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    let da = da.data_mut();
                    for s in 0..ba {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let out = &mut da[s * m * k..(s + 1) * m * k];
                        if *ta {
                            matmul(bs, *tb, gs, true, out, k, n, m, true);
                        } else {
                            matmul(gs, false, bs, !*tb, out, m, n, k, true);
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    let db = db.data_mut();
                    for s in 0..ba {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let out = &mut db[s * k * n..(s + 1) * k * n];
                        if *tb {
                            matmul(gs, true, as_, *ta, out, n, m, k, true);
                        } else {
                            matmul(as_, !*ta, gs, false, out, k, m, n, true);
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (a, &b) in d.data_mut().iter_mut().zip(g) {
                        *a += b * *f;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let f = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                if let Some(ds) = self.grad_buf(grads, *s) {
                    ds.data_mut()[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
                }
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (a, &b) in d.data_mut().iter_mut().zip(g) {
                        *a += b * f;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = *gy.shape().last().expect("rank >= 1");
                let yv = node.value.data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    let d = d.data_mut();
                    for r in 0..gy.len() / cols.max(1) {
                        let range = r * cols..(r + 1) * cols;
                        let ys = &yv[range.clone()];
                        let gs = &g[range.clone()];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for (i, o) in d[range].iter_mut().enumerate() {
                            *o += ys[i] * (gs[i] - dot);
                        }
                    }
                }
            }
            Op::Spp { x, argmax } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    let d = d.data_mut();
                    for (&idx, &gg) in argmax.iter().zip(g) {
                        d[idx] += gg;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = dims2(self.value(*x)).expect("2-D");
                let fout = gy.shape()[1];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    matmul(g, false, self.value(*w).data(), false, dx.data_mut(), n, fout, fin, true);
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    matmul(g, true, self.value(*x).data(), false, dw.data_mut(), fout, n, fin, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_buf(grads, *b) {
                        let db = db.data_mut();
                        for row in g.chunks(fout) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = g[0] / t_from_usize(va.len());
                let sign = |x: T, y: T| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        T::zero()
                    }
                };
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(va).zip(vb) {
                        *o += sign(x, y);
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(va).zip(vb) {
                        *o -= sign(x, y);
                    }
                }
            }
            Op::MeanSqOffset(x, t) => {
                let xv = self.value(*x).data();
                let k = g[0] * T::from_f64(2.0) / t_from_usize(xv.len());
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (o, &v) in d.data_mut().iter_mut().zip(xv) {
                        *o += k * (v - *t);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if let Some(d) = self.grad_buf(grads, id) {
                        d.data_mut()[0] += g[0] * w;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / t_from_usize(n);
                if let Some(d) = self.grad_buf(grads, *logits) {
                    let d = d.data_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, ci, h, wd) = self.value(x).dims4().expect("conv input is 4-D");
        let wshape = self.value(w).shape();
        let (co, k) = (wshape[0], wshape[2]);
        let geom = ConvGeom::new(ci, h, wd, k, stride, pad).expect("validated in forward");
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let g = gy.data();
        let in_len = ci * h * wd;
        let per_sample = map_indices(n, |s| {
            let xs = &xv[s * in_len..(s + 1) * in_len];
            let gs = &g[s * co * cols..(s + 1) * co * cols];
            let dw = need_w.then(|| {
                let mut dw = vec![T::zero(); co * rows];
                if geom.is_pointwise() {
                    matmul(gs, false, xs, true, &mut dw, co, cols, rows, false);
                } else {
                    let mut col = vec![T::zero(); rows * cols];
                    im2col(xs, &geom, &mut col);
                    matmul(gs, false, &col, true, &mut dw, co, cols, rows, false);
                }
                dw
            });
            let dx = need_x.then(|| {
                let mut dx = vec![T::zero(); in_len];
                if geom.is_pointwise() {
                    matmul(wv, true, gs, false, &mut dx, rows, co, cols, false);
                } else {
                    let mut dcol = vec![T::zero(); rows * cols];
                    matmul(wv, true, gs, false, &mut dcol, rows, co, cols, false);
                    col2im(&dcol, &geom, &mut dx);
                }
                dx
            });
            (dx, dw)
        });
        self.scatter_conv_grads(per_sample, x, w, b, co, cols, g, grads);
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv_transpose(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, ci, hi, wi) = self.value(x).dims4().expect("input is 4-D");
        let (_, co, ho, wo) = gy.dims4().expect("output is 4-D");
        let k = self.value(w).shape()[2];
        let geom = ConvGeom::new(co, ho, wo, k, stride, pad).expect("validated in forward");
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let g = gy.data();
        let in_len = ci * hi * wi;
        let out_len = co * ho * wo;
        let per_sample = map_indices(n, |s| {
            let xs = &xv[s * in_len..(s + 1) * in_len];
            let gs = &g[s * out_len..(s + 1) * out_len];
            let mut dcol = vec![T::zero(); rows * cols];
            im2col(gs, &geom, &mut dcol);
            let dw = need_w.then(|| {
                let mut dw = vec![T::zero(); ci * rows];
                matmul(xs, false, &dcol, true, &mut dw, ci, cols, rows, false);
                dw
            });
            let dx = need_x.then(|| {
                let mut dx = vec![T::zero(); in_len];
                matmul(wv, false, &dcol, false, &mut dx, ci, rows, cols, false);
                dx
            });
            (dx, dw)
        });
        self.scatter_conv_grads(per_sample, x, w, b, co, ho * wo, g, grads);
    }

    /// Sums per-sample weight gradients in sample order and writes the input
    /// gradient blocks.
    #[allow(clippy::too_many_arguments)]
    fn scatter_conv_grads(
        &self,
        per_sample: Vec<SampleGrads<T>>,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        co: usize,
        plane: usize,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let in_len = self.value(x).len() / per_sample.len().max(1);
        if let Some(dw) = self.grad_buf(grads, w) {
            let dw = dw.data_mut();
            for (_, sw) in &per_sample {
                if let Some(sw) = sw {
                    for (a, &v) in dw.iter_mut().zip(sw) {
                        *a += v;
                    }
                }
            }
        }
        if let Some(dx) = self.grad_buf(grads, x) {
            let dx = dx.data_mut();
            for (s, (sx, _)) in per_sample.iter().enumerate() {
                if let Some(sx) = sx {
                    for (a, &v) in dx[s * in_len..(s + 1) * in_len].iter_mut().zip(sx) {
                        *a += v;
                    }
                }
            }
        }
        if let Some(b) = b {
            if let Some(db) = self.grad_buf(grads, b) {
                let db = db.data_mut();
                for (i, chunk) in g.chunks(plane).enumerate() {
                    db[i % co] += chunk.iter().copied().sum::<T>();
                }
            }
        }
    }
}

fn check_bias<T: Real>(g: &Graph<T>, b: Option<NodeId>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        let len = g.value(b).len();
        if len != channels {
            return Err(Error::shape("bias length", channels, len));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn dims2<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(Error::shape("expected a 2-D tensor", "[N, F]", format!("{s:?}"))),
    }
}

fn dims3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape("expected a 3-D tensor", "[B, R, C]", format!("{s:?}"))),
    }
}
