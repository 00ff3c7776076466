//! Kernel definitions shared by the float and int8 paths.

use std::ops::{Add, Mul};

use super::{ExecError, TensorBuf};
use crate::ir::{conv_out_dim, Weight};

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Geometry of a square-kernel convolution over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, ExecError> {
        match (
            conv_out_dim(h, k, stride, pad),
            conv_out_dim(w, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                pad,
                oh,
                ow,
            }),
            _ => Err(ExecError::Kernel(format!(
                "kernel {k} larger than padded input {h}x{w} (pad {pad})"
            ))),
        }
    }

    /// Output positions `o` with `o*stride + tap - pad` inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        let hi = if len + p > tap {
            ((len + p - tap - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Direct convolution. `out` must be pre-filled with the bias of each
/// output channel; every tap is accumulated in (c_in, ky, kx) order.
///
/// Taps are visited as a flat (c_in, ky, kx) sequence in groups of four.
/// The shifted (and zero padded) input plane of each tap in a group is
/// gathered once, then the group is applied to every output channel,
/// adding the four products to each output in sequence.
pub fn conv_accumulate<T>(g: &ConvGeom, input: &[T], kernel: &[T], out: &mut [T])
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T>,
{
    let plane_in = g.h * g.w;
    let n = g.oh * g.ow;
    let kk = g.k * g.k;
    debug_assert_eq!(input.len(), g.c_in * plane_in);
    debug_assert_eq!(kernel.len(), g.c_out * g.c_in * kk);
    debug_assert_eq!(out.len(), g.c_out * n);
    let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = vec![T::default(); if direct { 0 } else { 4 * n }];
    let taps: Vec<(usize, usize)> = (0..g.c_in)
        .flat_map(|ic| (0..kk).map(move |t| (ic, t)))
        .collect();
    for group in taps.chunks(4) {
        if !direct {
            for (&(ic, tap), col) in group.iter().zip(cols.chunks_exact_mut(n)) {
                gather(g, &input[ic * plane_in..(ic + 1) * plane_in], tap, col);
            }
        }
        let srcs: Vec<&[T]> = group
            .iter()
            .enumerate()
            .map(|(i, &(ic, _))| {
                if direct {
                    &input[ic * plane_in..(ic + 1) * plane_in]
                } else {
                    &cols[i * n..(i + 1) * n]
                }
            })
            .collect();
        let w = |oc: usize, i: usize| {
            let (ic, tap) = group[i];
            kernel[(oc * g.c_in + ic) * kk + tap]
        };
        if let [s0, s1, s2, s3] = srcs[..] {
            let (s0, s1, s2, s3) = (&s0[..n], &s1[..n], &s2[..n], &s3[..n]);
            for (oc, o) in out.chunks_exact_mut(n).enumerate() {
                let (w0, w1, w2, w3) = (w(oc, 0), w(oc, 1), w(oc, 2), w(oc, 3));
                let o = &mut o[..n];
                for j in 0..n {
                    o[j] = o[j] + w0 * s0[j] + w1 * s1[j] + w2 * s2[j] + w3 * s3[j];
                }
            }
        } else {
            for (i, src) in srcs.iter().enumerate() {
                for (oc, o) in out.chunks_exact_mut(n).enumerate() {
                    let wv = w(oc, i);
                    for (o, &x) in o.iter_mut().zip(*src) {
                        *o = *o + wv * x;
                    }
                }
            }
        }
    }
}

/// The input plane shifted by kernel tap `tap`, zero where the tap falls in
/// the padding.
fn gather<T: Copy + Default>(g: &ConvGeom, plane: &[T], tap: usize, col: &mut [T]) {
    let (s, p) = (g.stride, g.pad);
    let (ky, kx) = (tap / g.k, tap % g.k);
    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
    col.fill(T::default());
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let irow = &plane[(oy * s + ky - p) * g.w..][..g.w];
        let crow = &mut col[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
        if s == 1 {
            crow.copy_from_slice(&irow[ox_lo + kx - p..ox_hi + kx - p]);
        } else {
            for (j, c) in crow.iter_mut().enumerate() {
                *c = irow[(ox_lo + j) * s + kx - p];
            }
        }
    }
}

/// Max pooling with implicit -inf padding: out-of-bounds taps are skipped.
pub fn maxpool_plane<T: Copy + PartialOrd>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, usize, usize), ExecError> {
    let g = ConvGeom::new((c, h, w), c, k, stride, pad)?;
    let mut out = Vec::with_capacity(c * g.oh * g.ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..g.oh {
            let y0 = (oy * stride) as isize - pad as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..g.ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                let mut best: Option<T> = None;
                for y in ys.clone() {
                    for &v in &plane[y * w + xs.start..y * w + xs.end] {
                        if best.is_none_or(|b| v > b) {
                            best = Some(v);
                        }
                    }
                }
                out.push(best.expect("window overlaps the input"));
            }
        }
    }
    Ok((out, g.oh, g.ow))
}

pub fn upsample_plane<T: Copy>(input: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(c * h * w * 4);
    for ch in 0..c {
        for y in 0..h * 2 {
            let row = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    out
}

fn f32_weight<'a>(w: &'a Weight, what: &str) -> Result<&'a [f32], ExecError> {
    w.data
        .as_f32()
        .ok_or_else(|| ExecError::Kernel(format!("{what} must be f32")))
}

/// `out[o,y,x] = bias[o] + sum_{c,u,v} in[c, y*s-p+u, x*s-p+v] * k[o,c,u,v]`
/// with zero padding.
pub fn conv2d_ref(
    input: &TensorBuf,
    kernel: &Weight,
    bias: Option<&Weight>,
    stride: usize,
    padding: usize,
) -> Result<TensorBuf, ExecError> {
    let x = input.as_f32()?;
    let kdata = f32_weight(kernel, "kernel")?;
    let [c_out, c_in, k, k2] = <[usize; 4]>::try_from(kernel.shape.as_slice())
        .map_err(|_| ExecError::Kernel("kernel must be 4-D".into()))?;
    let chw = input.chw();
    if k != k2 || c_in != chw.0 {
        return Err(ExecError::Kernel(format!(
            "kernel {:?} incompatible with input {:?}",
            kernel.shape,
            input.shape()
        )));
    }
    let g = ConvGeom::new(chw, c_out, k, stride, padding)?;
    let plane = g.oh * g.ow;
    let mut out = vec![0f32; c_out * plane];
    if let Some(b) = bias {
        let b = f32_weight(b, "bias")?;
        if b.len() != c_out {
            return Err(ExecError::Kernel("bias length differs from C_out".into()));
        }
        for (o, &bv) in out.chunks_mut(plane).zip(b) {
            o.fill(bv);
        }
    }
    conv_accumulate(&g, x, kdata, &mut out);
    Ok(TensorBuf::f32([1, c_out, g.oh, g.ow], out))
}

pub fn maxpool2d_ref(
    input: &TensorBuf,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<TensorBuf, ExecError> {
    let (c, _, _) = input.chw();
    let (out, oh, ow) = maxpool_plane(input.as_f32()?, input.chw(), k, stride, padding)?;
    Ok(TensorBuf::f32([1, c, oh, ow], out))
}

pub fn upsample_nearest2x(input: &TensorBuf) -> Result<TensorBuf, ExecError> {
    let (c, h, w) = input.chw();
    Ok(TensorBuf::f32(
        [1, c, h * 2, w * 2],
        upsample_plane(input.as_f32()?, (c, h, w)),
    ))
}

pub fn concat_channels(inputs: &[&TensorBuf]) -> Result<TensorBuf, ExecError> {
    let first = inputs
        .first()
        .ok_or_else(|| ExecError::Kernel("concat of nothing".into()))?;
    let (_, h, w) = first.chw();
    let mut c = 0;
    let mut data = Vec::new();
    for t in inputs {
        let (tc, th, tw) = t.chw();
        if (th, tw) != (h, w) {
            return Err(ExecError::Shape {
                tensor: t.id(),
                expected: [1, tc, h, w],
                found: t.shape(),
            });
        }
        c += tc;
        data.extend_from_slice(t.as_f32()?);
    }
    Ok(TensorBuf::f32([1, c, h, w], data))
}

pub fn add(a: &TensorBuf, b: &TensorBuf) -> Result<TensorBuf, ExecError> {
    if a.shape() != b.shape() {
        return Err(ExecError::Shape {
            tensor: b.id(),
            expected: a.shape(),
            found: b.shape(),
        });
    }
    let data = a
        .as_f32()?
        .iter()
        .zip(b.as_f32()?)
        .map(|(x, y)| x + y)
        .collect();
    Ok(TensorBuf::f32(a.shape(), data))
}
