//! Forward evaluation of every registered tensor op, plus the op records the
//! backward pass consumes.

use crate::error::{Error, Result};

use super::kernels;
use super::{
    broadcast_shape, broadcast_strides, classify_operand, strides_of, OperandMap, Tensor,
    EPS_GUARD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Log2,
    Relu,
    Softplus,
    Negate,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Unguarded division for callers that have already excluded zero
    /// denominators (e.g. Dempster normalization after the conflict check).
    DivExact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnKind {
    Exp,
    Log,
    Log2,
    Relu,
    Softplus,
    Negate,
    Power(f64),
}

/// Hook for fused domain kernels that participate in the autodiff graph:
/// the implementor reports its inputs and computes one adjoint per input.
pub trait CustomOp: Send + Sync {
    fn inputs(&self) -> Vec<Tensor>;
    /// Adjoints w.r.t. each input, in `inputs()` order, given the output
    /// node and its upstream gradient.
    fn backward(&self, node: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

pub(crate) enum Op {
    Binary {
        kind: BinKind,
        lhs: Tensor,
        rhs: Tensor,
    },
    Unary {
        kind: UnKind,
        input: Tensor,
    },
    Sum {
        input: Tensor,
        axes: Vec<usize>,
    },
    Mean {
        input: Tensor,
        axes: Vec<usize>,
    },
    Max {
        input: Tensor,
        /// Flat input index of the winning element, per output element.
        arg: Vec<usize>,
    },
    Conv3d {
        input: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        relu: bool,
        stride: usize,
        padding: usize,
    },
    Upsample {
        input: Tensor,
    },
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    Reshape {
        input: Tensor,
    },
    Broadcast {
        input: Tensor,
    },
    SliceChannels {
        input: Tensor,
        start: usize,
    },
    Custom(std::sync::Arc<dyn CustomOp>),
}

pub(crate) fn clamp_denominator(b: f64) -> f64 {
    if b >= 0.0 {
        b.max(EPS_GUARD)
    } else {
        b.min(-EPS_GUARD)
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} produced a non-finite value")));
    }
    Ok(())
}

/// Elementwise binary op with size-1-axis broadcasting. Common broadcast
/// layouts (same shape, scalar, channel suffix/prefix) take tight loops; the
/// adjoint in `grad.rs` mirrors the same classification.
fn binary(kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let f = match kind {
        BinKind::Add => |x: f64, y: f64| x + y,
        BinKind::Sub => |x: f64, y: f64| x - y,
        BinKind::Mul => |x: f64, y: f64| x * y,
        BinKind::Div => |x: f64, y: f64| x / clamp_denominator(y),
        BinKind::DivExact => |x: f64, y: f64| x / y,
    };
    let da = a.data();
    let db = b.data();
    let map_a = classify_operand(a.shape(), &out_shape);
    let map_b = classify_operand(b.shape(), &out_shape);
    let mut out: Vec<f64> = Vec::with_capacity(n);
    match (map_a, map_b) {
        (OperandMap::Full, OperandMap::Full) => {
            out.extend(da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)));
        }
        (OperandMap::Full, OperandMap::Scalar) => {
            let y = db[0];
            out.extend(da.iter().map(|&x| f(x, y)));
        }
        (OperandMap::Scalar, OperandMap::Full) => {
            let x = da[0];
            out.extend(db.iter().map(|&y| f(x, y)));
        }
        (OperandMap::Full, OperandMap::Suffix { len }) => {
            for chunk in da.chunks_exact(len) {
                out.extend(chunk.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)));
            }
        }
        (OperandMap::Suffix { len }, OperandMap::Full) => {
            for chunk in db.chunks_exact(len) {
                out.extend(da.iter().zip(chunk.iter()).map(|(&x, &y)| f(x, y)));
            }
        }
        (OperandMap::Full, OperandMap::Prefix { inner }) => {
            for (chunk, &y) in da.chunks_exact(inner).zip(db.iter()) {
                out.extend(chunk.iter().map(|&x| f(x, y)));
            }
        }
        (OperandMap::Prefix { inner }, OperandMap::Full) => {
            for (chunk, &x) in db.chunks_exact(inner).zip(da.iter()) {
                out.extend(chunk.iter().map(|&y| f(x, y)));
            }
        }
        _ => {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let rank = out_shape.len();
            let mut idx = vec![0usize; rank];
            let mut off_a = 0usize;
            let mut off_b = 0usize;
            for _ in 0..n {
                out.push(f(da[off_a], db[off_b]));
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    off_a += sa[ax];
                    off_b += sb[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                    off_a -= sa[ax] * out_shape[ax];
                    off_b -= sb[ax] * out_shape[ax];
                }
            }
        }
    }
    if matches!(kind, BinKind::Div | BinKind::DivExact) {
        check_finite(&out, "div")?;
    }
    Ok(Tensor::make(
        out,
        out_shape,
        Some(Op::Binary {
            kind,
            lhs: a.clone(),
            rhs: b.clone(),
        }),
    ))
}

fn unary(kind: UnKind, input: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = match kind {
        UnKind::Exp => input.data().iter().map(|&x| x.exp()).collect(),
        UnKind::Log => input.data().iter().map(|&x| x.max(EPS_GUARD).ln()).collect(),
        UnKind::Log2 => input.data().iter().map(|&x| x.max(EPS_GUARD).log2()).collect(),
        UnKind::Relu => input.data().iter().map(|&x| x.max(0.0)).collect(),
        UnKind::Softplus => input.data().iter().map(|&x| softplus(x)).collect(),
        UnKind::Negate => input.data().iter().map(|&x| -x).collect(),
        UnKind::Power(p) => input.data().iter().map(|&x| x.powf(p)).collect(),
    };
    match kind {
        UnKind::Exp => check_finite(&data, "exp")?,
        UnKind::Power(_) => check_finite(&data, "power")?,
        _ => {}
    }
    Ok(Tensor::make(
        data,
        input.shape().to_vec(),
        Some(Op::Unary {
            kind,
            input: input.clone(),
        }),
    ))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn validate_axes(rank: usize, axes: &[usize]) -> Result<()> {
    for &ax in axes {
        if ax >= rank {
            return Err(Error::Shape(format!("axis {ax} out of range for rank {rank}")));
        }
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &e) in shape.iter().enumerate() {
        if axes.contains(&i) {
            if keepdim {
                out.push(1);
            }
        } else {
            out.push(e);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Reduction layouts with contiguous fast paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReduceLayout {
    /// Axes form a leading block: input is `groups` chunks of `out_len`.
    Leading { groups: usize, out_len: usize },
    /// Axes form a trailing block: input is `out_len` chunks of `inner`.
    Trailing { out_len: usize, inner: usize },
    Generic,
}

pub(crate) fn classify_reduction(shape: &[usize], axes: &[usize]) -> ReduceLayout {
    let rank = shape.len();
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let k = sorted.len();
    if k == 0 || k > rank {
        return ReduceLayout::Generic;
    }
    if sorted.iter().enumerate().all(|(i, &ax)| ax == i) {
        return ReduceLayout::Leading {
            groups: shape[..k].iter().product(),
            out_len: shape[k..].iter().product(),
        };
    }
    if sorted.iter().enumerate().all(|(i, &ax)| ax == rank - k + i) {
        return ReduceLayout::Trailing {
            out_len: shape[..rank - k].iter().product(),
            inner: shape[rank - k..].iter().product(),
        };
    }
    ReduceLayout::Generic
}

/// Walk the input linearly, yielding the flat output offset each element
/// reduces into (output strides are 0 along reduced axes).
fn for_each_reduction<F: FnMut(usize, usize)>(shape: &[usize], axes: &[usize], mut visit: F) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&i| shape[i]).collect();
    let kept_strides = strides_of(&kept_shape);
    let mut out_stride = vec![0usize; rank];
    for (j, &i) in kept.iter().enumerate() {
        out_stride[i] = kept_strides[j];
    }
    let mut idx = vec![0usize; rank];
    let mut out_off = 0usize;
    for flat in 0..n {
        visit(flat, out_off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out_off += out_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            out_off -= out_stride[ax] * shape[ax];
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinKind::Mul, self, other)
    }

    /// Division with the denominator clamped away from zero by `EPS_GUARD`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinKind::Div, self, other)
    }

    pub(crate) fn div_exact(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinKind::DivExact, self, other)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(UnKind::Exp, self)
    }

    /// Natural log of `max(x, EPS_GUARD)`.
    pub fn log(&self) -> Result<Tensor> {
        unary(UnKind::Log, self)
    }

    /// Base-2 log of `max(x, EPS_GUARD)`.
    pub fn log2(&self) -> Result<Tensor> {
        unary(UnKind::Log2, self)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(UnKind::Relu, self)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        unary(UnKind::Softplus, self)
    }

    pub fn negate(&self) -> Result<Tensor> {
        unary(UnKind::Negate, self)
    }

    pub fn powf(&self, exponent: f64) -> Result<Tensor> {
        unary(UnKind::Power(exponent), self)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(c))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(c))
    }

    /// Dispatch table mirroring the registered elementwise op set.
    pub fn elementwise(kind: ElementwiseOp, inputs: &[&Tensor]) -> Result<Tensor> {
        let need = match kind {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div => 2,
            _ => 1,
        };
        if inputs.len() != need {
            return Err(Error::Shape(format!(
                "{kind:?} takes {need} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            ElementwiseOp::Add => inputs[0].add(inputs[1]),
            ElementwiseOp::Sub => inputs[0].sub(inputs[1]),
            ElementwiseOp::Mul => inputs[0].mul(inputs[1]),
            ElementwiseOp::Div => inputs[0].div(inputs[1]),
            ElementwiseOp::Exp => inputs[0].exp(),
            ElementwiseOp::Log => inputs[0].log(),
            ElementwiseOp::Log2 => inputs[0].log2(),
            ElementwiseOp::Relu => inputs[0].relu(),
            ElementwiseOp::Softplus => inputs[0].softplus(),
            ElementwiseOp::Negate => inputs[0].negate(),
            ElementwiseOp::Power => Err(Error::Shape(
                "power requires an exponent; use Tensor::powf".into(),
            )),
        }
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        validate_axes(self.rank(), axes)?;
        if self.is_empty() {
            return Err(Error::EmptyReduction("sum over empty tensor".into()));
        }
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![0.0f64; out_n];
        let data = self.data();
        match classify_reduction(self.shape(), axes) {
            ReduceLayout::Leading { out_len, .. } => {
                for chunk in data.chunks_exact(out_len) {
                    for (o, &v) in out.iter_mut().zip(chunk.iter()) {
                        *o += v;
                    }
                }
            }
            ReduceLayout::Trailing { inner, .. } => {
                for (o, chunk) in out.iter_mut().zip(data.chunks_exact(inner)) {
                    *o = chunk.iter().sum();
                }
            }
            ReduceLayout::Generic => {
                for_each_reduction(self.shape(), axes, |flat, out_off| {
                    out[out_off] += data[flat];
                });
            }
        }
        Ok(Tensor::make(
            out,
            out_shape,
            Some(Op::Sum {
                input: self.clone(),
                axes: axes.to_vec(),
            }),
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        validate_axes(self.rank(), axes)?;
        if self.is_empty() {
            return Err(Error::EmptyReduction("mean over empty tensor".into()));
        }
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![0.0f64; out_n];
        let data = self.data();
        match classify_reduction(self.shape(), axes) {
            ReduceLayout::Leading { out_len, .. } => {
                for chunk in data.chunks_exact(out_len) {
                    for (o, &v) in out.iter_mut().zip(chunk.iter()) {
                        *o += v;
                    }
                }
            }
            ReduceLayout::Trailing { inner, .. } => {
                for (o, chunk) in out.iter_mut().zip(data.chunks_exact(inner)) {
                    *o = chunk.iter().sum();
                }
            }
            ReduceLayout::Generic => {
                for_each_reduction(self.shape(), axes, |flat, out_off| {
                    out[out_off] += data[flat];
                });
            }
        }
        let inv = 1.0 / count as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        Ok(Tensor::make(
            out,
            out_shape,
            Some(Op::Mean {
                input: self.clone(),
                axes: axes.to_vec(),
            }),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.mean_axes(&axes, false)
    }

    /// Max over `axes`. Gradient routes to the first maximal element.
    pub fn max_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        validate_axes(self.rank(), axes)?;
        if self.is_empty() {
            return Err(Error::EmptyReduction("max over empty tensor".into()));
        }
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; out_n];
        let mut arg = vec![usize::MAX; out_n];
        let data = self.data();
        for_each_reduction(self.shape(), axes, |flat, out_off| {
            if data[flat] > out[out_off] {
                out[out_off] = data[flat];
                arg[out_off] = flat;
            }
        });
        Ok(Tensor::make(
            out,
            out_shape,
            Some(Op::Max {
                input: self.clone(),
                arg,
            }),
        ))
    }

    /// Index of the largest element along `axis`; ties break toward the lower
    /// index. No gradient.
    pub fn argmax_axis(&self, axis: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        validate_axes(self.rank(), &[axis])?;
        if self.is_empty() {
            return Err(Error::EmptyReduction("argmax over empty tensor".into()));
        }
        let out_shape = reduced_shape(self.shape(), &[axis], false);
        let out_n: usize = out_shape.iter().product();
        let mut best = vec![f64::NEG_INFINITY; out_n];
        let mut arg = vec![0usize; out_n];
        let strides = strides_of(self.shape());
        let axis_stride = strides[axis];
        let axis_len = self.shape()[axis];
        let data = self.data();
        for_each_reduction(self.shape(), &[axis], |flat, out_off| {
            if data[flat] > best[out_off] {
                best[out_off] = data[flat];
                arg[out_off] = (flat / axis_stride) % axis_len;
            }
        });
        Ok((arg, out_shape))
    }

    pub fn reduce(&self, kind: ReduceOp, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        match kind {
            ReduceOp::Sum => self.sum_axes(axes, keepdim),
            ReduceOp::Mean => self.mean_axes(axes, keepdim),
            ReduceOp::Max => self.max_axes(axes, keepdim),
            ReduceOp::Argmax => Err(Error::Shape(
                "argmax returns indices; use Tensor::argmax_axis".into(),
            )),
        }
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                new_shape
            )));
        }
        Ok(Tensor::make(
            self.data().to_vec(),
            new_shape.to_vec(),
            Some(Op::Reshape {
                input: self.clone(),
            }),
        ))
    }

    /// Materialize this tensor broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::Shape(format!(
                "{:?} does not broadcast to {:?}",
                self.shape(),
                shape
            )));
        }
        let n: usize = shape.iter().product();
        let strides = broadcast_strides(self.shape(), shape);
        let data = self.data();
        let mut out = Vec::with_capacity(n);
        let rank = shape.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            out.push(data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= strides[ax] * shape[ax];
            }
        }
        Ok(Tensor::make(
            out,
            shape.to_vec(),
            Some(Op::Broadcast {
                input: self.clone(),
            }),
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        validate_axes(rank, &[axis])?;
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.rank() != rank {
                return Err(Error::Shape("concat rank mismatch".into()));
            }
            for (i, (&a, &b)) in out_shape.iter().zip(p.shape().iter()).enumerate() {
                if i != axis && a != b {
                    return Err(Error::Shape(format!(
                        "concat extent mismatch on axis {i}: {a} vs {b}"
                    )));
                }
            }
            out_shape[axis] += p.shape()[axis];
        }
        // Copy block-wise: each input contributes contiguous runs of
        // (extent_along_axis * inner) values per outer index.
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![0.0f64; out_n];
        let out_axis = out_shape[axis];
        let mut axis_offset = 0usize;
        for p in parts {
            let p_axis = p.shape()[axis];
            let block = p_axis * inner;
            let pdata = p.data();
            for o in 0..outer {
                let src = &pdata[o * block..(o + 1) * block];
                let dst_start = o * out_axis * inner + axis_offset * inner;
                out[dst_start..dst_start + block].copy_from_slice(src);
            }
            axis_offset += p_axis;
        }
        Ok(Tensor::make(
            out,
            out_shape,
            Some(Op::Concat {
                inputs: parts.to_vec(),
                axis,
            }),
        ))
    }

    /// 3D cross-correlation. `input` is `[C_in, D, H, W]`, `kernel` is
    /// `[C_out, C_in, k, k, k]` with odd `k`; `padding` must be 0 or
    /// `(k - 1) / 2`.
    pub fn conv3d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        self.conv3d_fused(kernel, None, false, stride, padding)
    }

    /// Convolution with the per-channel bias add and the ReLU folded into
    /// the same kernel (one output pass instead of three).
    pub fn conv3d_fused(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        relu: bool,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if let Some(b) = bias {
            if b.len() != kernel.shape()[0] {
                return Err(Error::Shape(format!(
                    "bias of {} values does not match {} output channels",
                    b.len(),
                    kernel.shape()[0]
                )));
            }
        }
        let (out, out_shape) = kernels::conv3d_forward(self, kernel, bias, relu, stride, padding)?;
        Ok(Tensor::make(
            out,
            out_shape,
            Some(Op::Conv3d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                relu,
                stride,
                padding,
            }),
        ))
    }

    /// Trilinear upsampling (align-corners-false) of a `[C, D, H, W]` tensor
    /// to the given spatial extents.
    pub fn trilinear_upsample(&self, target: [usize; 3]) -> Result<Tensor> {
        let (out, out_shape) = kernels::upsample_forward(self, target)?;
        Ok(Tensor::make(
            out,
            out_shape,
            Some(Op::Upsample {
                input: self.clone(),
            }),
        ))
    }

    /// Contiguous block of `count` leading-axis channels starting at `start`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        if self.rank() == 0 || start + count > self.shape()[0] {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {:?}",
                start + count,
                self.shape()
            )));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[0] = count;
        let data = self.data()[start * inner..(start + count) * inner].to_vec();
        Ok(Tensor::make(
            data,
            shape,
            Some(Op::SliceChannels {
                input: self.clone(),
                start,
            }),
        ))
    }

    /// Register a fused custom kernel's output in the graph.
    pub fn from_custom_op(
        data: Vec<f64>,
        shape: &[usize],
        op: std::sync::Arc<dyn CustomOp>,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "custom op output shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor::make(data, shape.to_vec(), Some(Op::Custom(op))))
    }
}
