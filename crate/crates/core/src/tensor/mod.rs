//! Dense row-major f64 tensors with a minimal define-by-run reverse-mode
//! autodiff graph. Values are immutable after construction; each op records its
//! inputs and an adjoint rule, and the per-step graph is dropped once
//! `backward` has run.

mod grad;
mod kernels;
mod ops;

pub use grad::{finite_diff_check, finite_diff_check_multi, Gradients};
pub use ops::{CustomOp, ElementwiseOp, ReduceOp};

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub(crate) use ops::Op;

/// Argument/denominator clamp applied by `log`, `log2` and `div`.
pub const EPS_GUARD: f64 = 1e-8;

/// Storage precision for tensor values, selected globally.
///
/// `F64` is the default and what every documented tolerance assumes. `F32`
/// rounds the result of every construction and op through IEEE-754 single
/// precision, and is the default payload width for bulk volume files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

static GLOBAL_PRECISION: AtomicU8 = AtomicU8::new(1); // 0 = F32, 1 = F64

pub fn set_global_precision(p: Precision) {
    GLOBAL_PRECISION.store(matches!(p, Precision::F64) as u8, Ordering::Relaxed);
}

pub fn global_precision() -> Precision {
    if GLOBAL_PRECISION.load(Ordering::Relaxed) == 0 {
        Precision::F32
    } else {
        Precision::F64
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Option<Op>,
}

/// Immutable dense tensor handle. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?}", self.id(), self.shape())?;
        if self.len() <= 8 {
            write!(f, ", data={:?}", self.data())?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub(crate) fn make(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>) -> Tensor {
        let mut data = data;
        if global_precision() == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            op,
        }))
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor::make(data, shape.to_vec(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(vec![0.0; n], shape.to_vec(), None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(vec![value; n], shape.to_vec(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![value], vec![1], None)
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.shape())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Extract the single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of {} elements",
                self.len()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Same values, no graph provenance. Shares storage.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: None,
        }))
    }

    /// Fresh leaf with one coordinate displaced; used by finite differencing.
    pub fn with_perturbed(&self, index: usize, delta: f64) -> Tensor {
        let mut data = self.data().to_vec();
        data[index] += delta;
        Tensor::make(data, self.shape().to_vec(), None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (s, &extent) in strides.iter_mut().zip(shape.iter()).rev() {
        *s = acc;
        acc *= extent;
    }
    strides
}

/// Broadcast result shape of two operand shapes (size-1 axes stretch, missing
/// leading axes count as size 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::Shape(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to (the trailing axes of) `out_shape`, with 0 on
/// broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let rank = out_shape.len();
    let mut out = vec![0usize; rank];
    for i in 0..shape.len() {
        let o = rank - shape.len() + i;
        out[o] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// How one operand's elements map onto the broadcast output; the hot paths
/// (same shape, scalar, channel-suffix, channel-prefix) get tight loops, the
/// rest fall back to the generic odometer walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OperandMap {
    /// Operand shape equals the output shape.
    Full,
    /// Single element.
    Scalar,
    /// Operand tiles the output: `off = flat % len` (all non-unit axes form
    /// a trailing block matching the output).
    Suffix { len: usize },
    /// Operand indexes by outer block: `off = flat / inner` (non-unit axes
    /// form a leading block).
    Prefix { inner: usize },
    /// Anything else.
    Generic,
}

pub(crate) fn classify_operand(shape: &[usize], out_shape: &[usize]) -> OperandMap {
    let len: usize = shape.iter().product();
    if len == 1 {
        return OperandMap::Scalar;
    }
    let rank = out_shape.len();
    // right-aligned extents padded with leading 1s
    let aligned: Vec<usize> = (0..rank)
        .map(|i| {
            if i + shape.len() >= rank {
                shape[i + shape.len() - rank]
            } else {
                1
            }
        })
        .collect();
    if aligned == out_shape {
        return OperandMap::Full;
    }
    // suffix: ones, then exact match to the end
    let first_non_one = aligned.iter().position(|&e| e != 1).unwrap_or(rank);
    if aligned[first_non_one..] == out_shape[first_non_one..] {
        return OperandMap::Suffix { len };
    }
    // prefix: exact match, then ones to the end
    let last_non_one = rank - 1 - aligned.iter().rev().position(|&e| e != 1).unwrap_or(rank - 1);
    if aligned[..=last_non_one] == out_shape[..=last_non_one]
        && aligned[last_non_one + 1..].iter().all(|&e| e == 1)
    {
        let inner: usize = out_shape[last_non_one + 1..].iter().product();
        return OperandMap::Prefix { inner };
    }
    OperandMap::Generic
}
