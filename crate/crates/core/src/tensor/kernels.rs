//! Direct 3D convolution and trilinear interpolation kernels, plus their
//! adjoints. Parallelism is restricted to disjoint output regions so results
//! are bit-reproducible regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::Tensor;

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if input.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv3d input must be [C,D,H,W], got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 5 {
        return Err(Error::Shape(format!(
            "conv3d kernel must be [C_out,C_in,k,k,k], got {:?}",
            kernel.shape()
        )));
    }
    let c_in = input.shape()[0];
    let c_out = kernel.shape()[0];
    if kernel.shape()[1] != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, input has {}",
            kernel.shape()[1],
            c_in
        )));
    }
    let k = kernel.shape()[2];
    if kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(Error::Shape("conv3d kernel must be cubic".into()));
    }
    if k % 2 == 0 {
        return Err(Error::Shape("conv3d kernel size must be odd".into()));
    }
    if padding != 0 && padding != (k - 1) / 2 {
        return Err(Error::Shape(format!(
            "padding must be 0 or (k-1)/2 = {}, got {padding}",
            (k - 1) / 2
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let mut out_spatial = [0usize; 3];
    let in_spatial = [input.shape()[1], input.shape()[2], input.shape()[3]];
    for i in 0..3 {
        let padded = in_spatial[i] + 2 * padding;
        if padded < k {
            return Err(Error::Shape(format!(
                "spatial extent {} too small for kernel {k}",
                in_spatial[i]
            )));
        }
        out_spatial[i] = (padded - k) / stride + 1;
    }
    Ok(ConvDims {
        c_in,
        c_out,
        k,
        in_spatial,
        out_spatial,
    })
}

/// Valid output range along one axis for a kernel tap offset `t = k_i - p`:
/// all `o` with `0 <= o*s + t < extent`.
fn valid_range(out_len: usize, in_len: usize, s: usize, t: i64) -> (usize, usize) {
    let lo = if t >= 0 {
        0usize
    } else {
        (((-t) as usize) + s - 1) / s
    };
    let hi_i = in_len as i64 - 1 - t;
    if hi_i < 0 {
        return (0, 0);
    }
    let hi = (hi_i as usize) / s + 1;
    (lo.min(out_len), hi.min(out_len))
}

pub(crate) fn conv3d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    relu: bool,
    stride: usize,
    padding: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let dims = conv_dims(input, kernel, stride, padding)?;
    let [din, hin, win] = dims.in_spatial;
    let [dout, hout, wout] = dims.out_spatial;
    let out_plane = dout * hout * wout;
    let mut out = vec![0.0f64; dims.c_out * out_plane];
    let x = input.data();
    let ker = kernel.data();
    let k = dims.k;
    let p = padding as i64;

    let fast3 = k == 3 && stride == 1 && padding == 1 && win >= 2;
    out.par_chunks_mut(out_plane).enumerate().for_each(|(co, out_co)| {
        if let Some(b) = bias {
            out_co.fill(b.data()[co]);
        }
        for ci in 0..dims.c_in {
            let x_c = &x[ci * din * hin * win..(ci + 1) * din * hin * win];
            if fast3 {
                // 3x3x3 same-padding: the kw taps unroll into one three-tap
                // row update, halving loop overhead on the hot path.
                let ker_base = ((co * dims.c_in + ci) * 27) as usize;
                for kd in 0..3usize {
                    let td = kd as i64 - 1;
                    let (od_lo, od_hi) = valid_range(dout, din, 1, td);
                    for kh in 0..3usize {
                        let th = kh as i64 - 1;
                        let (oh_lo, oh_hi) = valid_range(hout, hin, 1, th);
                        let w0 = ker[ker_base + (kd * 3 + kh) * 3];
                        let w1 = ker[ker_base + (kd * 3 + kh) * 3 + 1];
                        let w2 = ker[ker_base + (kd * 3 + kh) * 3 + 2];
                        if w0 == 0.0 && w1 == 0.0 && w2 == 0.0 {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = (od as i64 + td) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as i64 + th) as usize;
                                let in_row = &x_c[(id * hin + ih) * win..][..win];
                                let out_row = &mut out_co[(od * hout + oh) * wout..][..wout];
                                out_row[0] += w1 * in_row[0] + w2 * in_row[1];
                                for ow in 1..win - 1 {
                                    out_row[ow] += w0 * in_row[ow - 1]
                                        + w1 * in_row[ow]
                                        + w2 * in_row[ow + 1];
                                }
                                out_row[win - 1] +=
                                    w0 * in_row[win - 2] + w1 * in_row[win - 1];
                            }
                        }
                    }
                }
                continue;
            }
            for kd in 0..k {
                let td = kd as i64 - p;
                let (od_lo, od_hi) = valid_range(dout, din, stride, td);
                for kh in 0..k {
                    let th = kh as i64 - p;
                    let (oh_lo, oh_hi) = valid_range(hout, hin, stride, th);
                    for kw in 0..k {
                        let tw = kw as i64 - p;
                        let (ow_lo, ow_hi) = valid_range(wout, win, stride, tw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let w = ker[(((co * dims.c_in + ci) * k + kd) * k + kh) * k + kw];
                        if w == 0.0 {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = (od * stride) as i64 + td;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * stride) as i64 + th;
                                let in_row =
                                    &x_c[(id as usize * hin + ih as usize) * win..][..win];
                                let out_row = &mut out_co[(od * hout + oh) * wout..][..wout];
                                if stride == 1 {
                                    let src = &in_row[(ow_lo as i64 + tw) as usize
                                        ..(ow_hi as i64 + tw) as usize];
                                    for (o, s_val) in
                                        out_row[ow_lo..ow_hi].iter_mut().zip(src.iter())
                                    {
                                        *o += w * s_val;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = (ow * stride) as i64 + tw;
                                        out_row[ow] += w * in_row[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if relu {
            for v in out_co.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    });

    Ok((out, vec![dims.c_out, dout, hout, wout]))
}

pub(crate) fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dims = conv_dims(input, kernel, stride, padding).expect("validated at forward");
    let [din, hin, win] = dims.in_spatial;
    let [dout, hout, wout] = dims.out_spatial;
    let in_plane = din * hin * win;
    let out_plane = dout * hout * wout;
    let x = input.data();
    let ker = kernel.data();
    let k = dims.k;
    let p = padding as i64;

    let fast3 = k == 3 && stride == 1 && padding == 1 && win >= 2;

    // d_input: each input channel is written by exactly one task.
    let mut d_input = vec![0.0f64; dims.c_in * in_plane];
    d_input.par_chunks_mut(in_plane).enumerate().for_each(|(ci, dx_c)| {
        for co in 0..dims.c_out {
            let g_c = &grad_out[co * out_plane..(co + 1) * out_plane];
            if fast3 {
                // transpose of the three-tap row update: flipped weights
                let ker_base = (co * dims.c_in + ci) * 27;
                for kd in 0..3usize {
                    let td = kd as i64 - 1;
                    let (od_lo, od_hi) = valid_range(dout, din, 1, td);
                    for kh in 0..3usize {
                        let th = kh as i64 - 1;
                        let (oh_lo, oh_hi) = valid_range(hout, hin, 1, th);
                        let w0 = ker[ker_base + (kd * 3 + kh) * 3];
                        let w1 = ker[ker_base + (kd * 3 + kh) * 3 + 1];
                        let w2 = ker[ker_base + (kd * 3 + kh) * 3 + 2];
                        if w0 == 0.0 && w1 == 0.0 && w2 == 0.0 {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = (od as i64 + td) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as i64 + th) as usize;
                                let g_row = &g_c[(od * hout + oh) * wout..][..wout];
                                let dx_row = &mut dx_c[(id * hin + ih) * win..][..win];
                                dx_row[0] += w0 * g_row[1] + w1 * g_row[0];
                                for iw in 1..win - 1 {
                                    dx_row[iw] += w0 * g_row[iw + 1]
                                        + w1 * g_row[iw]
                                        + w2 * g_row[iw - 1];
                                }
                                dx_row[win - 1] +=
                                    w1 * g_row[win - 1] + w2 * g_row[win - 2];
                            }
                        }
                    }
                }
                continue;
            }
            for kd in 0..k {
                let td = kd as i64 - p;
                let (od_lo, od_hi) = valid_range(dout, din, stride, td);
                for kh in 0..k {
                    let th = kh as i64 - p;
                    let (oh_lo, oh_hi) = valid_range(hout, hin, stride, th);
                    for kw in 0..k {
                        let tw = kw as i64 - p;
                        let (ow_lo, ow_hi) = valid_range(wout, win, stride, tw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let w = ker[(((co * dims.c_in + ci) * k + kd) * k + kh) * k + kw];
                        if w == 0.0 {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = ((od * stride) as i64 + td) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * stride) as i64 + th) as usize;
                                let g_row = &g_c[(od * hout + oh) * wout..][..wout];
                                let dx_row = &mut dx_c[(id * hin + ih) * win..][..win];
                                if stride == 1 {
                                    let dst = &mut dx_row[(ow_lo as i64 + tw) as usize
                                        ..(ow_hi as i64 + tw) as usize];
                                    for (d, g) in dst.iter_mut().zip(g_row[ow_lo..ow_hi].iter()) {
                                        *d += w * g;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * stride) as i64 + tw) as usize;
                                        dx_row[iw] += w * g_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // d_kernel: each output-channel slab of the kernel is one task.
    let ker_slab = dims.c_in * k * k * k;
    let mut d_kernel = vec![0.0f64; dims.c_out * ker_slab];
    d_kernel.par_chunks_mut(ker_slab).enumerate().for_each(|(co, dk_co)| {
        let g_c = &grad_out[co * out_plane..(co + 1) * out_plane];
        for ci in 0..dims.c_in {
            let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
            if fast3 {
                for kd in 0..3usize {
                    let td = kd as i64 - 1;
                    let (od_lo, od_hi) = valid_range(dout, din, 1, td);
                    for kh in 0..3usize {
                        let th = kh as i64 - 1;
                        let (oh_lo, oh_hi) = valid_range(hout, hin, 1, th);
                        let mut acc0 = 0.0f64;
                        let mut acc1 = 0.0f64;
                        let mut acc2 = 0.0f64;
                        for od in od_lo..od_hi {
                            let id = (od as i64 + td) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as i64 + th) as usize;
                                let g_row = &g_c[(od * hout + oh) * wout..][..wout];
                                let in_row = &x_c[(id * hin + ih) * win..][..win];
                                acc1 += g_row[0] * in_row[0];
                                acc2 += g_row[0] * in_row[1];
                                for ow in 1..win - 1 {
                                    let g = g_row[ow];
                                    acc0 += g * in_row[ow - 1];
                                    acc1 += g * in_row[ow];
                                    acc2 += g * in_row[ow + 1];
                                }
                                acc0 += g_row[win - 1] * in_row[win - 2];
                                acc1 += g_row[win - 1] * in_row[win - 1];
                            }
                        }
                        let base = (ci * 3 + kd) * 9 + kh * 3;
                        dk_co[base] += acc0;
                        dk_co[base + 1] += acc1;
                        dk_co[base + 2] += acc2;
                    }
                }
                continue;
            }
            for kd in 0..k {
                let td = kd as i64 - p;
                let (od_lo, od_hi) = valid_range(dout, din, stride, td);
                for kh in 0..k {
                    let th = kh as i64 - p;
                    let (oh_lo, oh_hi) = valid_range(hout, hin, stride, th);
                    for kw in 0..k {
                        let tw = kw as i64 - p;
                        let (ow_lo, ow_hi) = valid_range(wout, win, stride, tw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for od in od_lo..od_hi {
                            let id = ((od * stride) as i64 + td) as usize;
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * stride) as i64 + th) as usize;
                                let g_row = &g_c[(od * hout + oh) * wout..][..wout];
                                let in_row = &x_c[(id * hin + ih) * win..][..win];
                                if stride == 1 {
                                    let src = &in_row[(ow_lo as i64 + tw) as usize
                                        ..(ow_hi as i64 + tw) as usize];
                                    for (g, s_val) in g_row[ow_lo..ow_hi].iter().zip(src.iter()) {
                                        acc += g * s_val;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * stride) as i64 + tw) as usize;
                                        acc += g_row[ow] * in_row[iw];
                                    }
                                }
                            }
                        }
                        dk_co[((ci * k + kd) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });

    (d_input, d_kernel)
}

/// Per-axis interpolation taps: low index, high index and the weight of the
/// high tap, for every output coordinate.
fn interp_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let w = src - i0;
            let lo = (i0.max(0.0) as usize).min(in_len - 1);
            let hi = ((i0 as i64 + 1).max(0) as usize).min(in_len - 1);
            // Outside the volume both taps clamp to the same voxel; the
            // weight no longer matters but keep it consistent.
            if i0 < 0.0 {
                (lo, hi, 0.0)
            } else if i0 as usize >= in_len - 1 {
                (lo, hi, 0.0)
            } else {
                (lo, hi, w)
            }
        })
        .collect()
}

fn upsample_dims(input: &Tensor, target: [usize; 3]) -> Result<()> {
    if input.rank() != 4 {
        return Err(Error::Shape(format!(
            "trilinear_upsample input must be [C,D,H,W], got {:?}",
            input.shape()
        )));
    }
    for i in 0..3 {
        if target[i] == 0 || input.shape()[i + 1] == 0 {
            return Err(Error::Shape("zero-size axis in trilinear_upsample".into()));
        }
        if target[i] < input.shape()[i + 1] {
            return Err(Error::Shape(format!(
                "target extent {} below input extent {}",
                target[i],
                input.shape()[i + 1]
            )));
        }
    }
    Ok(())
}

pub(crate) fn upsample_forward(
    input: &Tensor,
    target: [usize; 3],
) -> Result<(Vec<f64>, Vec<usize>)> {
    upsample_dims(input, target)?;
    let c = input.shape()[0];
    let (din, hin, win) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let [dt, ht, wt] = target;
    let taps_d = interp_axis(din, dt);
    let taps_h = interp_axis(hin, ht);
    let taps_w = interp_axis(win, wt);
    let in_plane = din * hin * win;
    let out_plane = dt * ht * wt;
    let x = input.data();
    let mut out = vec![0.0f64; c * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(ch, out_c)| {
        let x_c = &x[ch * in_plane..(ch + 1) * in_plane];
        let mut o = 0usize;
        for &(d0, d1, wd) in &taps_d {
            for &(h0, h1, wh) in &taps_h {
                let r00 = &x_c[(d0 * hin + h0) * win..][..win];
                let r01 = &x_c[(d0 * hin + h1) * win..][..win];
                let r10 = &x_c[(d1 * hin + h0) * win..][..win];
                let r11 = &x_c[(d1 * hin + h1) * win..][..win];
                for &(w0, w1, ww) in &taps_w {
                    let c00 = r00[w0] * (1.0 - ww) + r00[w1] * ww;
                    let c01 = r01[w0] * (1.0 - ww) + r01[w1] * ww;
                    let c10 = r10[w0] * (1.0 - ww) + r10[w1] * ww;
                    let c11 = r11[w0] * (1.0 - ww) + r11[w1] * ww;
                    let c0 = c00 * (1.0 - wh) + c01 * wh;
                    let c1 = c10 * (1.0 - wh) + c11 * wh;
                    out_c[o] = c0 * (1.0 - wd) + c1 * wd;
                    o += 1;
                }
            }
        }
    });
    Ok((out, vec![c, dt, ht, wt]))
}

pub(crate) fn upsample_backward(input: &Tensor, target: [usize; 3], grad_out: &[f64]) -> Vec<f64> {
    let c = input.shape()[0];
    let (din, hin, win) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let [dt, ht, wt] = target;
    let out_plane = dt * ht * wt;
    let taps_d = interp_axis(din, dt);
    let taps_h = interp_axis(hin, ht);
    let taps_w = interp_axis(win, wt);
    let in_plane = din * hin * win;
    let mut d_input = vec![0.0f64; c * in_plane];
    d_input.par_chunks_mut(in_plane).enumerate().for_each(|(ch, dx_c)| {
        let g_c = &grad_out[ch * out_plane..(ch + 1) * out_plane];
        let mut o = 0usize;
        for &(d0, d1, wd) in &taps_d {
            for &(h0, h1, wh) in &taps_h {
                for &(w0, w1, ww) in &taps_w {
                    let g = g_c[o];
                    o += 1;
                    dx_c[(d0 * hin + h0) * win + w0] += g * (1.0 - wd) * (1.0 - wh) * (1.0 - ww);
                    dx_c[(d0 * hin + h0) * win + w1] += g * (1.0 - wd) * (1.0 - wh) * ww;
                    dx_c[(d0 * hin + h1) * win + w0] += g * (1.0 - wd) * wh * (1.0 - ww);
                    dx_c[(d0 * hin + h1) * win + w1] += g * (1.0 - wd) * wh * ww;
                    dx_c[(d1 * hin + h0) * win + w0] += g * wd * (1.0 - wh) * (1.0 - ww);
                    dx_c[(d1 * hin + h0) * win + w1] += g * wd * (1.0 - wh) * ww;
                    dx_c[(d1 * hin + h1) * win + w0] += g * wd * wh * (1.0 - ww);
                    dx_c[(d1 * hin + h1) * win + w1] += g * wd * wh * ww;
                }
            }
        }
    });
    d_input
}
