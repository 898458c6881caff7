//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Graph`] records every operation as it executes and keeps the forward
//! value of each node. [`Graph::backward`] replays the tape once in reverse,
//! summing adjoints at fan-in points; gradients of leaf nodes are returned,
//! intermediate adjoints are freed as soon as they have been propagated.
//! Graphs are single-use: one forward build, at most one backward. Parallelism
//! lives above this module (e.g. one graph per sample in a batch).

use crate::error::{Error, Result};
use crate::fault;
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Conv { x: NodeId, w: NodeId, bias: NodeId, geom: ConvGeom },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    ChannelNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    PowScalar { x: NodeId, e: f64 },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Reshape { x: NodeId },
    Transpose { x: NodeId, ax0: usize, ax1: usize },
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { x: NodeId, axis: usize, start: usize },
    Upsample2x { x: NodeId, axes: Vec<usize> },
    SumAll { x: NodeId },
    SumAxis { x: NodeId, axis: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Saved per-row/per-position 1/sqrt(var+eps) for the norm ops.
    inv_std: Option<Vec<T>>,
}

/// Gradients returned by [`Graph::backward`], indexed by the leaf's [`NodeId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a leaf. Pass `requires_grad=true` for parameters and any
    /// input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad, None)
    }

    /// Leaf that never receives a gradient (inputs, masks, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool, inv_std: Option<Vec<T>>) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, inv_std });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // -- products ----------------------------------------------------------

    /// Matrix product. Accepts [n,k]x[k,m] or batched [b,n,k]x[b,k,m] with
    /// exactly equal batch extents.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        let out_shape = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                vec![sa[0], sb[1]]
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                vec![sa[0], sa[1], sb[2]]
            }
            _ => return Err(mismatch()),
        };
        let (batch, n, k, m) = if sa.len() == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        let mut out = Tensor::zeros(&out_shape);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let ov = out.data_mut();
            for i in 0..batch {
                kernels::matmul_acc(
                    &av[i * n * k..(i + 1) * n * k],
                    &bv[i * k * m..(i + 1) * k * m],
                    n,
                    k,
                    m,
                    &mut ov[i * n * m..(i + 1) * n * m],
                );
            }
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, rg, None))
    }

    /// x . w + bias, where x is [..., c_in], w is [c_in, c_out], bias is [c_out].
    /// Composed from matmul and add_bias, so it differentiates for free.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let c_in = ws[0];
        let c_out = ws[1];
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = if xs.len() == 2 { x } else { self.reshape(x, &[rows, c_in])? };
        let prod = self.matmul(flat, w)?;
        let with_bias = self.add_bias(prod, bias)?;
        if xs.len() == 2 {
            Ok(with_bias)
        } else {
            let mut out_shape = xs[..xs.len() - 1].to_vec();
            out_shape.push(c_out);
            self.reshape(with_bias, &out_shape)
        }
    }

    /// x + bias broadcast over all leading axes; the only broadcast in the library.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if bs.len() != 1 || xs.is_empty() || *xs.last().unwrap() != bs[0] {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: xs, rhs: bs });
        }
        let c = bs[0];
        let mut out = self.nodes[x.0].value.clone();
        {
            let bv = self.nodes[bias.0].value.data().to_vec();
            let ov = out.data_mut();
            for row in ov.chunks_exact_mut(c) {
                for (o, &b) in row.iter_mut().zip(&bv) {
                    *o += b;
                }
            }
        }
        let rg = self.any_requires(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg, None))
    }

    // -- softmax family ------------------------------------------------------

    /// Row-stochastic softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::BadShape {
            op: "softmax",
            shape: xs.clone(),
            reason: "rank 0".into(),
        })?;
        let rows = self.nodes[x.0].value.numel() / cols;
        let mut out = Tensor::zeros(&xs);
        kernels::softmax_rows(self.nodes[x.0].value.data(), rows, cols, out.data_mut());
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg, None))
    }

    /// log(softmax(x)) over the last axis, computed stably.
    pub fn logsoftmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::BadShape {
            op: "logsoftmax",
            shape: xs.clone(),
            reason: "rank 0".into(),
        })?;
        let rows = self.nodes[x.0].value.numel() / cols;
        let mut out = Tensor::zeros(&xs);
        kernels::logsoftmax_rows(self.nodes[x.0].value.data(), rows, cols, out.data_mut());
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x }, rg, None))
    }

    // -- normalization -------------------------------------------------------

    /// Layer norm over the last (channel) axis of token layouts [..., C].
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::BadShape {
            op: "layer_norm",
            shape: xs.clone(),
            reason: "rank 0".into(),
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.nodes[x.0].value.numel() / c;
        let mut out = Tensor::zeros(&xs);
        let mut inv_std = vec![T::zero(); rows];
        kernels::layer_norm_rows(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            rows,
            c,
            T::from_f64(eps),
            out.data_mut(),
            &mut inv_std,
        );
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, rg, Some(inv_std)))
    }

    /// Layer norm over the leading channel axis of map layouts [C, spatial...].
    /// Same statistic as `layer_norm` after unfolding to tokens, without the
    /// two transposes.
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::BadShape {
                op: "channel_norm",
                shape: xs,
                reason: "need [C, spatial...]".into(),
            });
        }
        let c = xs[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let positions = self.nodes[x.0].value.numel() / c;
        let mut out = Tensor::zeros(&xs);
        let mut inv_std = vec![T::zero(); positions];
        kernels::channel_norm(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            c,
            positions,
            T::from_f64(eps),
            out.data_mut(),
            &mut inv_std,
        );
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(out, Op::ChannelNorm { x, gamma, beta }, rg, Some(inv_std)))
    }

    // -- convolution ---------------------------------------------------------

    /// Cross-correlation of x [c_in, spatial...] with w [c_out, c_in, k...],
    /// plus bias [c_out]. `stride`/`pad` have one entry per spatial axis
    /// (2 or 3 axes supported).
    pub fn conv(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: &[usize], pad: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let spatial_rank = xs.len().saturating_sub(1);
        if !(2..=3).contains(&spatial_rank)
            || ws.len() != spatial_rank + 2
            || ws[1] != xs[0]
            || stride.len() != spatial_rank
            || pad.len() != spatial_rank
        {
            return Err(Error::ShapeMismatch { op: "conv", lhs: xs, rhs: ws });
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv",
                lhs: ws,
                rhs: self.shape(bias).to_vec(),
            });
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::BadShape {
                op: "conv",
                shape: stride.to_vec(),
                reason: "zero stride".into(),
            });
        }

        // normalize 2D to 3D with a unit depth axis
        let lift = |sp: &[usize], fill: usize| -> [usize; 3] {
            if sp.len() == 3 {
                [sp[0], sp[1], sp[2]]
            } else {
                [fill, sp[0], sp[1]]
            }
        };
        let in_sp = lift(&xs[1..], 1);
        let kernel = lift(&ws[2..], 1);
        let stride3 = lift(stride, 1);
        let pad3 = if pad.len() == 3 { [pad[0], pad[1], pad[2]] } else { [0, pad[0], pad[1]] };

        let mut out_sp = [0usize; 3];
        for i in 0..3 {
            if in_sp[i] + 2 * pad3[i] < kernel[i] {
                return Err(Error::BadShape {
                    op: "conv",
                    shape: xs,
                    reason: format!("kernel {:?} exceeds padded input {:?}", kernel, in_sp),
                });
            }
            out_sp[i] = ConvGeom::out_extent(in_sp[i], kernel[i], stride3[i], pad3[i]);
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            in_sp,
            out_sp,
            kernel,
            stride: stride3,
            pad: pad3,
        };

        let mut out_shape = vec![ws[0]];
        if spatial_rank == 3 {
            out_shape.extend_from_slice(&out_sp);
        } else {
            out_shape.extend_from_slice(&out_sp[1..]);
        }
        let mut out = Tensor::zeros(&out_shape);
        kernels::conv_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[bias.0].value.data(),
            &geom,
            out.data_mut(),
        );
        let rg = self.any_requires(&[x, w, bias]);
        Ok(self.push(out, Op::Conv { x, w, bias, geom }, rg, None))
    }

    // -- elementwise ---------------------------------------------------------

    fn binary(&mut self, opname: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: opname, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok((out, self.any_requires(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, rg, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, rg, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, rg, None))
    }

    /// Elementwise a / b. Caller guarantees b is bounded away from zero.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div { a, b }, rg, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_requires(&[x]);
        self.push(out, Op::Relu { x }, rg, None)
    }

    /// Tanh-approximation gelu with the documented constants.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = T::from_f64(kernels::GELU_SQRT_2_OVER_PI);
        let k = T::from_f64(kernels::GELU_CUBIC);
        let half = T::from_f64(0.5);
        let out = self.nodes[x.0].value.map(|v| {
            let t = (c * (v + k * v * v * v)).tanh();
            half * v * (T::one() + t)
        });
        let rg = self.any_requires(&[x]);
        self.push(out, Op::Gelu { x }, rg, None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.exp());
        let rg = self.any_requires(&[x]);
        self.push(out, Op::Exp { x }, rg, None)
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.ln());
        let rg = self.any_requires(&[x]);
        self.push(out, Op::Log { x }, rg, None)
    }

    /// x^e for a fixed exponent. Fractional exponents require x >= 0.
    pub fn powf(&mut self, x: NodeId, e: f64) -> NodeId {
        let ee = T::from_f64(e);
        let out = self.nodes[x.0].value.map(|v| v.powf(ee));
        let rg = self.any_requires(&[x]);
        self.push(out, Op::PowScalar { x, e }, rg, None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cc = T::from_f64(c);
        let out = self.nodes[x.0].value.map(|v| v * cc);
        let rg = self.any_requires(&[x]);
        self.push(out, Op::Scale { x, c }, rg, None)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let cc = T::from_f64(c);
        let out = self.nodes[x.0].value.map(|v| v + cc);
        let rg = self.any_requires(&[x]);
        self.push(out, Op::AddScalar { x }, rg, None)
    }

    // -- shape family --------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg, None))
    }

    /// Swaps two axes (copying).
    pub fn transpose(&mut self, x: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if ax0 >= xs.len() || ax1 >= xs.len() || ax0 == ax1 {
            return Err(Error::BadShape {
                op: "transpose",
                shape: xs,
                reason: format!("cannot swap axes {ax0} and {ax1}"),
            });
        }
        let mut out_shape = xs.clone();
        out_shape.swap(ax0, ax1);
        let mut out = Tensor::zeros(&out_shape);
        kernels::transpose_copy(self.nodes[x.0].value.data(), &xs, ax0, ax1, out.data_mut());
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Transpose { x, ax0, ax1 }, rg, None))
    }

    /// Concatenates along `axis`; all other extents must agree exactly.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat",
                shape: vec![],
                reason: "no parts".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::BadShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0usize;
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != first.len()
                || ps.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: ps.to_vec(),
                });
            }
            total += ps[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut out = Tensor::zeros(&out_shape);
        {
            let ov = out.data_mut();
            let mut offset = 0usize;
            for &p in parts {
                let len = self.nodes[p.0].value.shape()[axis];
                let pv = self.nodes[p.0].value.data();
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * total + offset) * inner;
                    ov[dst..dst + len * inner].copy_from_slice(&pv[src..src + len * inner]);
                }
                offset += len;
            }
        }
        let rg = self.any_requires(parts);
        Ok(self.push(out, Op::Concat { axis, parts: parts.to_vec() }, rg, None))
    }

    /// Contiguous range [start, start+len) along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::BadShape {
                op: "slice",
                shape: xs,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let full = xs[axis];
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        {
            let xv = self.nodes[x.0].value.data();
            let ov = out.data_mut();
            for o in 0..outer {
                let src = (o * full + start) * inner;
                let dst = o * len * inner;
                ov[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
            }
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg, None))
    }

    /// Splits `axis` into consecutive chunks of the given sizes.
    /// `concat(axis, split(x, axis, sizes))` round-trips bit-exactly.
    pub fn split(&mut self, x: NodeId, axis: usize, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::BadShape {
                op: "split",
                shape: self.shape(x).to_vec(),
                reason: format!("axis {axis} out of range"),
            })?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::BadShape {
                op: "split",
                shape: self.shape(x).to_vec(),
                reason: format!("sizes {sizes:?} do not sum to extent {extent}"),
            });
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Nearest-neighbor doubling of the chosen axes.
    pub fn upsample2x(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= xs.len()) {
            return Err(Error::BadShape {
                op: "upsample2x",
                shape: xs,
                reason: format!("bad axes {axes:?}"),
            });
        }
        let out_shape = kernels::upsampled_shape(&xs, axes);
        let mut out = Tensor::zeros(&out_shape);
        kernels::upsample2x(self.nodes[x.0].value.data(), &xs, axes, out.data_mut());
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Upsample2x { x, axes: axes.to_vec() }, rg, None))
    }

    // -- reductions ----------------------------------------------------------

    /// Sum of all elements, as a [1] tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let rg = self.any_requires(&[x]);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, rg, None)
    }

    /// Sum of a rank-2 tensor over one axis: [n,m] -> [m] (axis 0) or [n] (axis 1).
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || axis > 1 {
            return Err(Error::BadShape {
                op: "sum_axis",
                shape: xs,
                reason: format!("need rank 2, axis 0 or 1, got axis {axis}"),
            });
        }
        let (n, m) = (xs[0], xs[1]);
        let xv = self.nodes[x.0].value.data();
        let out = if axis == 0 {
            let mut acc = vec![T::zero(); m];
            for row in xv.chunks_exact(m) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(vec![m], acc)?
        } else {
            let mut acc = vec![T::zero(); n];
            for (a, row) in acc.iter_mut().zip(xv.chunks_exact(m)) {
                for &v in row {
                    *a += v;
                }
            }
            Tensor::new(vec![n], acc)?
        };
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::SumAxis { x, axis }, rg, None))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Each node is visited once; adjoints
    /// sum where a value fans out. Returns gradients for leaves created with
    /// `requires_grad=true`. A graph supports exactly one backward; build a
    /// fresh graph per step (that is the "zero grad").
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this graph; build a fresh graph per step".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autodiff(
                "loss is detached: no differentiable leaf feeds it".into(),
            ));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Adds `delta` into the adjoint slot of `id` (skipping non-grad nodes).
    fn acc_into(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: &Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => {
                for (a, &d) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            None => grads[id.0] = Some(delta.clone()),
        }
    }

    /// Mutable zeroed-if-absent adjoint buffer for kernels that accumulate.
    fn buf_of<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        grads[id.0].as_mut()
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let (batch, n, k, m) = if sa.len() == 2 {
                    (1, sa[0], sa[1], self.shape(*b)[1])
                } else {
                    (sa[0], sa[1], sa[2], self.shape(*b)[2])
                };
                let gv = g.data();
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let da = self.buf_of(grads, *a).unwrap().data_mut();
                    for i in 0..batch {
                        kernels::matmul_nt_acc(
                            &gv[i * n * m..(i + 1) * n * m],
                            &bv[i * k * m..(i + 1) * k * m],
                            n,
                            m,
                            k,
                            &mut da[i * n * k..(i + 1) * n * k],
                        );
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let db = self.buf_of(grads, *b).unwrap().data_mut();
                    for i in 0..batch {
                        kernels::matmul_tn_acc(
                            &av[i * n * k..(i + 1) * n * k],
                            &gv[i * n * m..(i + 1) * n * m],
                            n,
                            k,
                            m,
                            &mut db[i * k * m..(i + 1) * k * m],
                        );
                    }
                }
            }

            Op::Softmax { x } => {
                if self.nodes[x.0].requires_grad {
                    let y = node.value.data().to_vec();
                    let cols = *node.value.shape().last().unwrap();
                    let rows = y.len() / cols;
                    // The documented negative-control hook: doubles the adjoint
                    // scaling so gradient checks must detect the mismatch.
                    let gain = if fault::softmax_grad_fault() {
                        T::from_f64(2.0)
                    } else {
                        T::one()
                    };
                    let dx = self.buf_of(grads, *x).unwrap().data_mut();
                    kernels::softmax_rows_backward(&y, g.data(), rows, cols, gain, dx);
                }
            }

            Op::LogSoftmax { x } => {
                if self.nodes[x.0].requires_grad {
                    let y = node.value.data().to_vec();
                    let cols = *node.value.shape().last().unwrap();
                    let rows = y.len() / cols;
                    let dx = self.buf_of(grads, *x).unwrap().data_mut();
                    kernels::logsoftmax_rows_backward(&y, g.data(), rows, cols, dx);
                }
            }

            Op::AddBias { x, bias } => {
                self.acc_into(grads, *x, g);
                if self.nodes[bias.0].requires_grad {
                    let c = self.nodes[bias.0].value.numel();
                    let db = self.buf_of(grads, *bias).unwrap().data_mut();
                    for row in g.data().chunks_exact(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }

            Op::Conv { x, w, bias, geom } => {
                if self.nodes[x.0].requires_grad {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let dx = self.buf_of(grads, *x).unwrap().data_mut();
                    kernels::conv_backward_data(g.data(), &wv, geom, dx);
                }
                if self.nodes[w.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let mut dw_local = vec![T::zero(); self.nodes[w.0].value.numel()];
                    let mut db_local = vec![T::zero(); self.nodes[bias.0].value.numel()];
                    kernels::conv_backward_weights(&xv, g.data(), geom, &mut dw_local, &mut db_local);
                    if let Some(dw) = self.buf_of(grads, *w) {
                        for (d, &v) in dw.data_mut().iter_mut().zip(&dw_local) {
                            *d += v;
                        }
                    }
                    if let Some(db) = self.buf_of(grads, *bias) {
                        for (d, &v) in db.data_mut().iter_mut().zip(&db_local) {
                            *d += v;
                        }
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta } => {
                let c = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / c;
                let inv_std = node.inv_std.as_ref().expect("layer_norm saves inv_std");
                let xv = self.nodes[x.0].value.data().to_vec();
                let gammav = self.nodes[gamma.0].value.data().to_vec();
                let mut dx_local = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                kernels::layer_norm_rows_backward(
                    &xv, &gammav, g.data(), inv_std, rows, c,
                    &mut dx_local, &mut dgamma, &mut dbeta,
                );
                self.acc_local(grads, *x, &dx_local);
                self.acc_local(grads, *gamma, &dgamma);
                self.acc_local(grads, *beta, &dbeta);
            }

            Op::ChannelNorm { x, gamma, beta } => {
                let c = node.value.shape()[0];
                let positions = node.value.numel() / c;
                let inv_std = node.inv_std.as_ref().expect("channel_norm saves inv_std");
                let xv = self.nodes[x.0].value.data().to_vec();
                let gammav = self.nodes[gamma.0].value.data().to_vec();
                let mut dx_local = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                kernels::channel_norm_backward(
                    &xv, &gammav, g.data(), inv_std, c, positions,
                    &mut dx_local, &mut dgamma, &mut dbeta,
                );
                self.acc_local(grads, *x, &dx_local);
                self.acc_local(grads, *gamma, &dgamma);
                self.acc_local(grads, *beta, &dbeta);
            }

            Op::Add { a, b } => {
                self.acc_into(grads, *a, g);
                self.acc_into(grads, *b, g);
            }

            Op::Sub { a, b } => {
                self.acc_into(grads, *a, g);
                if self.nodes[b.0].requires_grad {
                    let neg = g.map(|v| -v);
                    self.acc_into(grads, *b, &neg);
                }
            }

            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data();
                    let da: Vec<T> = g.data().iter().zip(bv).map(|(&gv, &v)| gv * v).collect();
                    self.acc_local(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data();
                    let db: Vec<T> = g.data().iter().zip(av).map(|(&gv, &v)| gv * v).collect();
                    self.acc_local(grads, *b, &db);
                }
            }

            Op::Div { a, b } => {
                let bv = self.nodes[b.0].value.data();
                if self.nodes[a.0].requires_grad {
                    let da: Vec<T> = g.data().iter().zip(bv).map(|(&gv, &v)| gv / v).collect();
                    self.acc_local(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let yv = node.value.data();
                    let db: Vec<T> = g
                        .data()
                        .iter()
                        .zip(yv)
                        .zip(bv)
                        .map(|((&gv, &y), &v)| -gv * y / v)
                        .collect();
                    self.acc_local(grads, *b, &db);
                }
            }

            Op::Relu { x } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.acc_local(grads, *x, &dx);
                }
            }

            Op::Gelu { x } => {
                if self.nodes[x.0].requires_grad {
                    let c = T::from_f64(kernels::GELU_SQRT_2_OVER_PI);
                    let k = T::from_f64(kernels::GELU_CUBIC);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = self.nodes[x.0].value.data();
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| {
                            let u = c * (v + k * v * v * v);
                            let t = u.tanh();
                            let du = c * (T::one() + three * k * v * v);
                            gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                        })
                        .collect();
                    self.acc_local(grads, *x, &dx);
                }
            }

            Op::Exp { x } => {
                if self.nodes[x.0].requires_grad {
                    let yv = node.value.data();
                    let dx: Vec<T> = g.data().iter().zip(yv).map(|(&gv, &y)| gv * y).collect();
                    self.acc_local(grads, *x, &dx);
                }
            }

            Op::Log { x } => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let dx: Vec<T> = g.data().iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
                    self.acc_local(grads, *x, &dx);
                }
            }

            Op::PowScalar { x, e } => {
                if self.nodes[x.0].requires_grad && *e != 0.0 {
                    let ee = T::from_f64(*e);
                    let em1 = T::from_f64(*e - 1.0);
                    let xv = self.nodes[x.0].value.data();
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| gv * ee * v.powf(em1))
                        .collect();
                    self.acc_local(grads, *x, &dx);
                }
            }

            Op::Scale { x, c } => {
                if self.nodes[x.0].requires_grad {
                    let cc = T::from_f64(*c);
                    let dx = g.map(|v| v * cc);
                    self.acc_into(grads, *x, &dx);
                }
            }

            Op::AddScalar { x } => {
                self.acc_into(grads, *x, g);
            }

            Op::Reshape { x } => {
                if self.nodes[x.0].requires_grad {
                    let dx = g.reshaped(self.nodes[x.0].value.shape())?;
                    self.acc_into(grads, *x, &dx);
                }
            }

            Op::Transpose { x, ax0, ax1 } => {
                if self.nodes[x.0].requires_grad {
                    let out_shape = node.value.shape().to_vec();
                    let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                    kernels::transpose_copy(g.data(), &out_shape, *ax0, *ax1, dx.data_mut());
                    self.acc_into(grads, *x, &dx);
                }
            }

            Op::Concat { axis, parts } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let gv = g.data();
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.nodes[p.0].requires_grad {
                        let dp = self.buf_of(grads, p).unwrap().data_mut();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                dp[dst + i] += gv[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }

            Op::Slice { x, axis, start } => {
                if self.nodes[x.0].requires_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let full = xs[*axis];
                    let len = node.value.shape()[*axis];
                    let gv = g.data();
                    let dx = self.buf_of(grads, *x).unwrap().data_mut();
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            dx[dst + i] += gv[src + i];
                        }
                    }
                }
            }

            Op::Upsample2x { x, axes } => {
                if self.nodes[x.0].requires_grad {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let dx = self.buf_of(grads, *x).unwrap().data_mut();
                    kernels::upsample2x_backward(g.data(), &in_shape, axes, dx);
                }
            }

            Op::SumAll { x } => {
                if self.nodes[x.0].requires_grad {
                    let gv = g.data()[0];
                    let dx = Tensor::full(self.nodes[x.0].value.shape(), gv);
                    self.acc_into(grads, *x, &dx);
                }
            }

            Op::SumAxis { x, axis } => {
                if self.nodes[x.0].requires_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (n, m) = (xs[0], xs[1]);
                    let gv = g.data();
                    let dx = self.buf_of(grads, *x).unwrap().data_mut();
                    if *axis == 0 {
                        for row in dx.chunks_exact_mut(m) {
                            for (d, &gvv) in row.iter_mut().zip(gv) {
                                *d += gvv;
                            }
                        }
                    } else {
                        for (i, row) in dx.chunks_exact_mut(m).enumerate() {
                            for d in row.iter_mut() {
                                *d += gv[i];
                            }
                        }
                        let _ = n;
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates a freshly computed local gradient buffer into a slot.
    fn acc_local(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, local: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = self.buf_of(grads, id).unwrap();
        for (d, &v) in buf.data_mut().iter_mut().zip(local) {
            *d += v;
        }
    }
}

/// Unfold helper used across fusion and norms: row-major token index of a
/// spatial position, tokens ordered with the last axis fastest.
pub fn token_index(spatial: &[usize], coord: &[usize]) -> usize {
    let strides = strides_of(spatial);
    coord.iter().zip(&strides).map(|(&c, &s)| c * s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], vals).unwrap()
    }

    #[test]
    fn matmul_identity_and_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = g.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let bad = g.constant(t2(3, 2, &[0.0; 6]));
        assert!(g.matmul(a, bad).is_err());
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2, 3], &(0..12).map(|i| i as f64).collect::<Vec<_>>()).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 3, 2], &(0..12).map(|i| (i as f64) * 0.5).collect::<Vec<_>>()).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 2]);

        for i in 0..2 {
            let asl = g.slice(a, 0, i, 1).unwrap();
            let asl = g.reshape(asl, &[2, 3]).unwrap();
            let bsl = g.slice(b, 0, i, 1).unwrap();
            let bsl = g.reshape(bsl, &[3, 2]).unwrap();
            let ysl = g.matmul(asl, bsl).unwrap();
            let want = g.value(ysl).data().to_vec();
            let got = &g.value(y).data()[i * 4..(i + 1) * 4];
            assert_eq!(got, &want[..]);
        }
    }

    #[test]
    fn linear_equals_matmul_plus_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(3, 2, &[0.5, -1.0, 2.0, 0.0, 1.5, 1.0]));
        let w = g.constant(t2(2, 4, &(0..8).map(|i| i as f64 * 0.25 - 0.5).collect::<Vec<_>>()));
        let b = g.constant(Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.0]).unwrap());
        let lin = g.linear(x, w, b).unwrap();
        let mm = g.matmul(x, w).unwrap();
        let composed = g.add_bias(mm, b).unwrap();
        assert_eq!(g.value(lin).data(), g.value(composed).data());
    }

    #[test]
    fn backward_of_square_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones_and_reruns_fail() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn backward_rejects_nonscalar_and_detached() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let y = g.relu(x);
        assert!(g.backward(y).is_err());

        let mut g2 = Graph::<f64>::new();
        let c = g2.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let s = g2.sum_all(c);
        assert!(g2.backward(s).is_err());
    }

    #[test]
    fn fan_in_gradients_sum() {
        // loss = sum(x + x) => dx = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap(), true);
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn split_concat_round_trip_is_exact() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(Tensor::from_f64(&[4, 6], &vals).unwrap());
        let parts = g.split(x, 1, &[2, 3, 1]).unwrap();
        let back = g.concat(1, &parts).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn transpose_round_trip_is_exact() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let x = g.constant(Tensor::from_f64(&[2, 3, 5], &vals).unwrap());
        let t = g.transpose(x, 0, 2).unwrap();
        assert_eq!(g.shape(t), &[5, 3, 2]);
        let back = g.transpose(t, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[3, 4], &(0..12).map(|i| (i as f64) * 1.7 - 8.0).collect::<Vec<_>>()).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks_exact(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_matches_pinned_value() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let y = g.gelu(x);
        assert!((g.value(y).data()[0] - 2.9964).abs() < 1e-4);

        // exact erf-gelu references; the tanh approximation sits within 1e-3
        let xn = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 1.0]).unwrap());
        let yn = g.gelu(xn);
        let v = g.value(yn).data();
        assert!((v[0] + 0.158655).abs() < 1e-3);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 0.841345).abs() < 1e-3);
    }

    #[test]
    fn sum_axis_directions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 7.0, 9.0]);
        let cols = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(cols).data(), &[6.0, 15.0]);
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let err = g.conv(x, w, b, &[1, 1], &[1, 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[3, 5, 3, 3]"), "{msg}");
    }
}
