//! Reverse-mode differentiation over the recorded op graph, and the central
//! finite-difference checker used to validate every adjoint rule.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::kernels;
use super::ops::{clamp_denominator, sigmoid, BinKind, Op, UnKind};
use super::{broadcast_strides, strides_of, Tensor, EPS_GUARD};

/// Gradients per tensor id, produced by [`Tensor::backward`]. Leaves that do
/// not lie on a path to the loss read back as zeros.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Tensor {
        self.map.get(&t.id()).cloned().unwrap_or_else(|| t.zeros_like())
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.map.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn op_inputs(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Binary { lhs, rhs, .. } => vec![lhs.clone(), rhs.clone()],
        Op::Unary { input, .. }
        | Op::Sum { input, .. }
        | Op::Mean { input, .. }
        | Op::Max { input, .. }
        | Op::Upsample { input }
        | Op::Reshape { input }
        | Op::Broadcast { input }
        | Op::SliceChannels { input, .. } => vec![input.clone()],
        Op::Conv3d {
            input,
            kernel,
            bias,
            ..
        } => {
            let mut inputs = vec![input.clone(), kernel.clone()];
            if let Some(b) = bias {
                inputs.push(b.clone());
            }
            inputs
        }
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Custom(op) => op.inputs(),
    }
}

impl Tensor {
    /// Reverse-topological accumulation of adjoints from a scalar loss node.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative post-order DFS; `order` ends up topologically sorted with
        // inputs before consumers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.op() {
                for input in op_inputs(op) {
                    if !seen.contains(&input.id()) {
                        stack.push((input, false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(op) = node.op() else { continue };
            let Some(grad) = grads.remove(&node.id()) else { continue };
            accumulate_op(op, node, &grad, &mut grads);
        }

        // Only leaves carry useful adjoints once the walk is done.
        let mut map = HashMap::new();
        for node in order {
            if node.is_leaf() {
                if let Some(g) = grads.remove(&node.id()) {
                    map.insert(node.id(), Tensor::make(g, node.shape().to_vec(), None));
                }
            }
        }
        Ok(Gradients { map })
    }
}

fn entry<'a>(grads: &'a mut HashMap<u64, Vec<f64>>, t: &Tensor) -> &'a mut Vec<f64> {
    grads.entry(t.id()).or_insert_with(|| vec![0.0; t.len()])
}

fn accumulate_op(op: &Op, node: &Tensor, grad: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match op {
        Op::Binary { kind, lhs, rhs } => {
            backward_binary(*kind, lhs, rhs, node, grad, grads);
        }
        Op::Unary { kind, input } => {
            let x = input.data();
            let y = node.data();
            let dx = entry(grads, input);
            match kind {
                UnKind::Exp => {
                    for i in 0..grad.len() {
                        dx[i] += grad[i] * y[i];
                    }
                }
                UnKind::Log => {
                    for i in 0..grad.len() {
                        if x[i] >= EPS_GUARD {
                            dx[i] += grad[i] / x[i];
                        }
                    }
                }
                UnKind::Log2 => {
                    let inv_ln2 = std::f64::consts::LOG2_E;
                    for i in 0..grad.len() {
                        if x[i] >= EPS_GUARD {
                            dx[i] += grad[i] * inv_ln2 / x[i];
                        }
                    }
                }
                UnKind::Relu => {
                    for i in 0..grad.len() {
                        if x[i] > 0.0 {
                            dx[i] += grad[i];
                        }
                    }
                }
                UnKind::Softplus => {
                    for i in 0..grad.len() {
                        dx[i] += grad[i] * sigmoid(x[i]);
                    }
                }
                UnKind::Negate => {
                    for i in 0..grad.len() {
                        dx[i] -= grad[i];
                    }
                }
                UnKind::Power(p) => {
                    for i in 0..grad.len() {
                        let d = p * x[i].powf(p - 1.0);
                        if d.is_finite() {
                            dx[i] += grad[i] * d;
                        }
                    }
                }
            }
        }
        Op::Sum { input, axes, .. } => {
            let dx = entry(grads, input);
            scatter_reduced_into(input.shape(), axes, grad, 1.0, dx);
        }
        Op::Mean { input, axes, .. } => {
            let count: usize = axes.iter().map(|&a| input.shape()[a]).product();
            let dx = entry(grads, input);
            scatter_reduced_into(input.shape(), axes, grad, 1.0 / count as f64, dx);
        }
        Op::Max { input, arg } => {
            let dx = entry(grads, input);
            for (o, &src) in arg.iter().enumerate() {
                if src != usize::MAX {
                    dx[src] += grad[o];
                }
            }
        }
        Op::Conv3d {
            input,
            kernel,
            bias,
            relu,
            stride,
            padding,
        } => {
            // fold the ReLU mask into the upstream gradient once; the fused
            // output equals the post-activation values, so `out > 0` marks
            // the pass-through region
            let masked: Vec<f64>;
            let g_eff: &[f64] = if *relu {
                let out = node.data();
                masked = grad
                    .iter()
                    .zip(out.iter())
                    .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                    .collect();
                &masked
            } else {
                grad
            };
            let (d_in, d_ker) = kernels::conv3d_backward(input, kernel, *stride, *padding, g_eff);
            add_into(entry(grads, input), &d_in);
            add_into(entry(grads, kernel), &d_ker);
            if let Some(b) = bias {
                let plane = g_eff.len() / b.len();
                let db = entry(grads, b);
                for (co, chunk) in g_eff.chunks_exact(plane).enumerate() {
                    db[co] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Upsample { input } => {
            let target = [node.shape()[1], node.shape()[2], node.shape()[3]];
            let d_in = kernels::upsample_backward(input, target, grad);
            add_into(entry(grads, input), &d_in);
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let out_axis = out_shape[*axis];
            let mut axis_offset = 0usize;
            for part in inputs {
                let p_axis = part.shape()[*axis];
                let block = p_axis * inner;
                let dp = entry(grads, part);
                for o in 0..outer {
                    let src_start = o * out_axis * inner + axis_offset * inner;
                    let dst = &mut dp[o * block..(o + 1) * block];
                    for (d, g) in dst.iter_mut().zip(grad[src_start..src_start + block].iter()) {
                        *d += g;
                    }
                }
                axis_offset += p_axis;
            }
        }
        Op::Reshape { input } => {
            add_into(entry(grads, input), grad);
        }
        Op::Broadcast { input } => {
            let dx = entry(grads, input);
            unbroadcast_into(grad, node.shape(), input.shape(), dx);
        }
        Op::SliceChannels { input, start } => {
            let inner: usize = input.shape()[1..].iter().product();
            let dx = entry(grads, input);
            add_into(&mut dx[start * inner..start * inner + grad.len()], grad);
        }
        Op::Custom(op) => {
            let inputs = op.inputs();
            let adjoints = op.backward(node, grad);
            debug_assert_eq!(inputs.len(), adjoints.len());
            for (input, adj) in inputs.iter().zip(adjoints) {
                add_into(entry(grads, input), &adj);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Scatter the upstream gradient of a reduction back over the input,
/// scaling each share by `scale` (1 for sum, 1/count for mean).
fn scatter_reduced_into(
    in_shape: &[usize],
    axes: &[usize],
    grad: &[f64],
    scale: f64,
    dst: &mut [f64],
) {
    match super::ops::classify_reduction(in_shape, axes) {
        super::ops::ReduceLayout::Leading { out_len, .. } => {
            for chunk in dst.chunks_exact_mut(out_len) {
                for (d, &g) in chunk.iter_mut().zip(grad.iter()) {
                    *d += g * scale;
                }
            }
        }
        super::ops::ReduceLayout::Trailing { inner, .. } => {
            for (chunk, &g) in dst.chunks_exact_mut(inner).zip(grad.iter()) {
                let share = g * scale;
                for d in chunk.iter_mut() {
                    *d += share;
                }
            }
        }
        super::ops::ReduceLayout::Generic => {
            let rank = in_shape.len();
            let n: usize = in_shape.iter().product();
            let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
            let kept_shape: Vec<usize> = kept.iter().map(|&i| in_shape[i]).collect();
            let kept_strides = strides_of(&kept_shape);
            let mut out_stride = vec![0usize; rank];
            for (j, &i) in kept.iter().enumerate() {
                out_stride[i] = kept_strides[j];
            }
            let mut idx = vec![0usize; rank];
            let mut out_off = 0usize;
            for flat in 0..n {
                dst[flat] += grad[out_off] * scale;
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    out_off += out_stride[ax];
                    if idx[ax] < in_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                    out_off -= out_stride[ax] * in_shape[ax];
                }
            }
        }
    }
}

/// Sum `grad` (laid out per `out_shape`) into `dst` (laid out per `in_shape`),
/// collapsing axes the input was broadcast along.
fn unbroadcast_into(grad: &[f64], out_shape: &[usize], in_shape: &[usize], dst: &mut [f64]) {
    let strides = broadcast_strides(in_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad {
        dst[off] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * out_shape[ax];
        }
    }
}

/// Adjoint loops for one binary op, specialized per operand layout; the
/// terms are `(dL/da, dL/db)` as functions of `(g, a, b)`.
fn binary_adjoint_loops<FA, FB>(
    lhs: &Tensor,
    rhs: &Tensor,
    node: &Tensor,
    grad: &[f64],
    grads: &mut HashMap<u64, Vec<f64>>,
    da_term: FA,
    db_term: FB,
) where
    FA: Fn(f64, f64, f64) -> f64,
    FB: Fn(f64, f64, f64) -> f64,
{
    let out_shape = node.shape();
    let a = lhs.data();
    let b = rhs.data();
    let mut da = vec![0.0f64; lhs.len()];
    let mut db = vec![0.0f64; rhs.len()];
    let map_a = super::classify_operand(lhs.shape(), out_shape);
    let map_b = super::classify_operand(rhs.shape(), out_shape);
    use super::OperandMap as M;
    match (map_a, map_b) {
        (M::Full, M::Full) => {
            for i in 0..grad.len() {
                da[i] += da_term(grad[i], a[i], b[i]);
                db[i] += db_term(grad[i], a[i], b[i]);
            }
        }
        (M::Full, M::Scalar) => {
            let bv = b[0];
            let mut acc = 0.0;
            for i in 0..grad.len() {
                da[i] += da_term(grad[i], a[i], bv);
                acc += db_term(grad[i], a[i], bv);
            }
            db[0] += acc;
        }
        (M::Scalar, M::Full) => {
            let av = a[0];
            let mut acc = 0.0;
            for i in 0..grad.len() {
                acc += da_term(grad[i], av, b[i]);
                db[i] += db_term(grad[i], av, b[i]);
            }
            da[0] += acc;
        }
        (M::Full, M::Suffix { len }) => {
            for (chunk_i, g_chunk) in grad.chunks_exact(len).enumerate() {
                let a_chunk = &a[chunk_i * len..(chunk_i + 1) * len];
                let da_chunk = &mut da[chunk_i * len..(chunk_i + 1) * len];
                for j in 0..len {
                    da_chunk[j] += da_term(g_chunk[j], a_chunk[j], b[j]);
                    db[j] += db_term(g_chunk[j], a_chunk[j], b[j]);
                }
            }
        }
        (M::Suffix { len }, M::Full) => {
            for (chunk_i, g_chunk) in grad.chunks_exact(len).enumerate() {
                let b_chunk = &b[chunk_i * len..(chunk_i + 1) * len];
                let db_chunk = &mut db[chunk_i * len..(chunk_i + 1) * len];
                for j in 0..len {
                    da[j] += da_term(g_chunk[j], a[j], b_chunk[j]);
                    db_chunk[j] += db_term(g_chunk[j], a[j], b_chunk[j]);
                }
            }
        }
        (M::Full, M::Prefix { inner }) => {
            for (chunk_i, g_chunk) in grad.chunks_exact(inner).enumerate() {
                let bv = b[chunk_i];
                let a_chunk = &a[chunk_i * inner..(chunk_i + 1) * inner];
                let da_chunk = &mut da[chunk_i * inner..(chunk_i + 1) * inner];
                let mut acc = 0.0;
                for j in 0..inner {
                    da_chunk[j] += da_term(g_chunk[j], a_chunk[j], bv);
                    acc += db_term(g_chunk[j], a_chunk[j], bv);
                }
                db[chunk_i] += acc;
            }
        }
        (M::Prefix { inner }, M::Full) => {
            for (chunk_i, g_chunk) in grad.chunks_exact(inner).enumerate() {
                let av = a[chunk_i];
                let b_chunk = &b[chunk_i * inner..(chunk_i + 1) * inner];
                let db_chunk = &mut db[chunk_i * inner..(chunk_i + 1) * inner];
                let mut acc = 0.0;
                for j in 0..inner {
                    acc += da_term(g_chunk[j], av, b_chunk[j]);
                    db_chunk[j] += db_term(g_chunk[j], av, b_chunk[j]);
                }
                da[chunk_i] += acc;
            }
        }
        _ => {
            // generic: accumulating through broadcast strides performs the
            // un-broadcast sum for free
            let rank = out_shape.len();
            let sa = broadcast_strides(lhs.shape(), out_shape);
            let sb = broadcast_strides(rhs.shape(), out_shape);
            let mut idx = vec![0usize; rank];
            let mut off_a = 0usize;
            let mut off_b = 0usize;
            for &g in grad {
                da[off_a] += da_term(g, a[off_a], b[off_b]);
                db[off_b] += db_term(g, a[off_a], b[off_b]);
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
    add_into(entry(grads, lhs), &da);
    add_into(entry(grads, rhs), &db);
}

fn backward_binary(
    kind: BinKind,
    lhs: &Tensor,
    rhs: &Tensor,
    node: &Tensor,
    grad: &[f64],
    grads: &mut HashMap<u64, Vec<f64>>,
) {
    match kind {
        BinKind::Add => {
            binary_adjoint_loops(lhs, rhs, node, grad, grads, |g, _, _| g, |g, _, _| g)
        }
        BinKind::Sub => {
            binary_adjoint_loops(lhs, rhs, node, grad, grads, |g, _, _| g, |g, _, _| -g)
        }
        BinKind::Mul => binary_adjoint_loops(
            lhs,
            rhs,
            node,
            grad,
            grads,
            |g, _, b| g * b,
            |g, a, _| g * a,
        ),
        BinKind::Div => binary_adjoint_loops(
            lhs,
            rhs,
            node,
            grad,
            grads,
            |g, _, b| g / clamp_denominator(b),
            |g, a, b| {
                if b.abs() >= EPS_GUARD {
                    let denom = clamp_denominator(b);
                    -g * a / (denom * denom)
                } else {
                    0.0
                }
            },
        ),
        BinKind::DivExact => binary_adjoint_loops(
            lhs,
            rhs,
            node,
            grad,
            grads,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        ),
    }
}

/// Max over coordinates of `|analytic - central| / (|analytic| + |central| + eps)`
/// for a scalar-valued tensor function, with central differences of width
/// `2 * step`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = point.detach();
    let loss = f(&x)?;
    if !loss.all_finite() {
        return Err(Error::Numeric("finite_diff_check: non-finite loss".into()));
    }
    let grads = loss.backward()?;
    let analytic = grads.get(&x);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let plus = f(&x.with_perturbed(i, step))?.item()?;
        let minus = f(&x.with_perturbed(i, -step))?.item()?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(
                "finite_diff_check: non-finite perturbed evaluation".into(),
            ));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `finite_diff_check` over several independent leaves feeding one scalar.
pub fn finite_diff_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = points.iter().map(|p| p.detach()).collect();
    let loss = f(&leaves)?;
    let grads = loss.backward()?;
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf);
        for i in 0..leaf.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut pert: Vec<Tensor> = leaves.clone();
                pert[li] = leaf.with_perturbed(i, delta);
                f(&pert)?.item()
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
