//! Raw forward/backward kernels for the 5-D ([N, C, D, H, W]) operations.
//!
//! Every kernel partitions its output so that each element is written by a
//! single rayon task with a fixed summation order. Results are therefore
//! independent of the thread count.

use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};

/// Stride and symmetric zero padding, identical along all three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dSpec {
    /// Stride 1 with padding that preserves the spatial size of an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Conv3dSpec {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn valid() -> Self {
        Conv3dSpec {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub fn from_shape(shape: &[usize], what: &str) -> Result<Self> {
        if shape.len() != 5 {
            return Err(Error::Shape(format!(
                "{what} expects a [N, C, D, H, W] tensor, got {shape:?}"
            )));
        }
        Ok(Dims5 {
            n: shape[0],
            c: shape[1],
            d: shape[2],
            h: shape[3],
            w: shape[4],
        })
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.d, self.h, self.w]
    }
}

fn conv_out_len(input: usize, kernel: usize, spec: Conv3dSpec) -> Option<usize> {
    let padded = input + 2 * spec.padding;
    (padded >= kernel).then(|| (padded - kernel) / spec.stride + 1)
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + k - pad` lands in `[0, input)`.
#[inline]
fn valid_range(input: usize, output: usize, k: usize, spec: Conv3dSpec) -> (usize, usize) {
    let s = spec.stride as isize;
    let off = k as isize - spec.padding as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_num = input as isize - off;
    let hi = if hi_num <= 0 { 0 } else { (hi_num + s - 1) / s };
    let hi = hi.min(output as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub x: Dims5,
    pub out: Dims5,
    pub k: [usize; 3],
    pub spec: Conv3dSpec,
}

pub(crate) fn conv3d_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    bias_len: Option<usize>,
    spec: Conv3dSpec,
) -> Result<ConvGeometry> {
    let x = Dims5::from_shape(x_shape, "conv3d input")?;
    if w_shape.len() != 5 {
        return Err(Error::Shape(format!(
            "conv3d weight must be [Cout, Cin, kd, kh, kw], got {w_shape:?}"
        )));
    }
    if spec.stride == 0 {
        return Err(Error::Contract("conv3d stride must be >= 1".into()));
    }
    let (cout, cin) = (w_shape[0], w_shape[1]);
    if cin != x.c {
        return Err(Error::Shape(format!(
            "conv3d channel mismatch: input has {} channels, weight expects {}",
            x.c, cin
        )));
    }
    if let Some(b) = bias_len {
        if b != cout {
            return Err(Error::Shape(format!(
                "conv3d bias has {b} entries for {cout} output channels"
            )));
        }
    }
    let k = [w_shape[2], w_shape[3], w_shape[4]];
    let dims = [x.d, x.h, x.w];
    let mut out_sp = [0usize; 3];
    for a in 0..3 {
        out_sp[a] = conv_out_len(dims[a], k[a], spec).ok_or_else(|| {
            Error::Shape(format!(
                "conv3d kernel {:?} larger than padded input {:?}",
                k, dims
            ))
        })?;
    }
    Ok(ConvGeometry {
        x,
        out: Dims5 {
            n: x.n,
            c: cout,
            d: out_sp[0],
            h: out_sp[1],
            w: out_sp[2],
        },
        k,
        spec,
    })
}

fn conv3d_forward_direct<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let ConvGeometry { x: xd, out, k, spec } = *g;
    let in_plane = xd.spatial();
    let out_plane = out.spatial();
    let ksz = k[0] * k[1] * k[2];
    let mut y = vec![T::zero(); out.n * out.c * out_plane];
    y.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(plane, dst)| {
            let n = plane / out.c;
            let co = plane % out.c;
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..xd.c {
                let src = &x[(n * xd.c + ci) * in_plane..][..in_plane];
                let wk = &w[(co * xd.c + ci) * ksz..][..ksz];
                for kz in 0..k[0] {
                    let (z0, z1) = valid_range(xd.d, out.d, kz, spec);
                    for ky in 0..k[1] {
                        let (y0, y1) = valid_range(xd.h, out.h, ky, spec);
                        for kx in 0..k[2] {
                            let (x0, x1) = valid_range(xd.w, out.w, kx, spec);
                            let wv = wk[(kz * k[1] + ky) * k[2] + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            for oz in z0..z1 {
                                let iz = oz * spec.stride + kz - spec.padding;
                                for oy in y0..y1 {
                                    let iy = oy * spec.stride + ky - spec.padding;
                                    let drow = &mut dst[(oz * out.h + oy) * out.w..][..out.w];
                                    let srow = &src[(iz * xd.h + iy) * xd.w..][..xd.w];
                                    if spec.stride == 1 {
                                        let ix0 = x0 + kx - spec.padding;
                                        let n = x1 - x0;
                                        for (o, &s) in
                                            drow[x0..x1].iter_mut().zip(&srow[ix0..ix0 + n])
                                        {
                                            *o += wv * s;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            let ix = ox * spec.stride + kx - spec.padding;
                                            drow[ox] += wv * srow[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

fn conv3d_backward_input_direct<T: Real>(g: &ConvGeometry, dy: &[T], w: &[T]) -> Vec<T> {
    let ConvGeometry { x: xd, out, k, spec } = *g;
    let in_plane = xd.spatial();
    let out_plane = out.spatial();
    let ksz = k[0] * k[1] * k[2];
    let mut dx = vec![T::zero(); xd.n * xd.c * in_plane];
    dx.par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(plane, dst)| {
            let n = plane / xd.c;
            let ci = plane % xd.c;
            for co in 0..out.c {
                let src = &dy[(n * out.c + co) * out_plane..][..out_plane];
                let wk = &w[(co * xd.c + ci) * ksz..][..ksz];
                for kz in 0..k[0] {
                    let (z0, z1) = valid_range(xd.d, out.d, kz, spec);
                    for ky in 0..k[1] {
                        let (y0, y1) = valid_range(xd.h, out.h, ky, spec);
                        for kx in 0..k[2] {
                            let (x0, x1) = valid_range(xd.w, out.w, kx, spec);
                            let wv = wk[(kz * k[1] + ky) * k[2] + kx];
                            for oz in z0..z1 {
                                let iz = oz * spec.stride + kz - spec.padding;
                                for oy in y0..y1 {
                                    let iy = oy * spec.stride + ky - spec.padding;
                                    let srow = &src[(oz * out.h + oy) * out.w..][..out.w];
                                    let drow = &mut dst[(iz * xd.h + iy) * xd.w..][..xd.w];
                                    if spec.stride == 1 {
                                        let ix0 = x0 + kx - spec.padding;
                                        let n = x1 - x0;
                                        for (d, &s) in
                                            drow[ix0..ix0 + n].iter_mut().zip(&srow[x0..x1])
                                        {
                                            *d += wv * s;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            let ix = ox * spec.stride + kx - spec.padding;
                                            drow[ix] += wv * srow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

fn conv3d_backward_weight_direct<T: Real>(g: &ConvGeometry, dy: &[T], x: &[T]) -> Vec<T> {
    let ConvGeometry { x: xd, out, k, spec } = *g;
    let in_plane = xd.spatial();
    let out_plane = out.spatial();
    let ksz = k[0] * k[1] * k[2];
    let mut dw = vec![T::zero(); out.c * xd.c * ksz];
    dw.par_chunks_mut(ksz).enumerate().for_each(|(pair, dst)| {
        let co = pair / xd.c;
        let ci = pair % xd.c;
        for n in 0..xd.n {
            let gy = &dy[(n * out.c + co) * out_plane..][..out_plane];
            let src = &x[(n * xd.c + ci) * in_plane..][..in_plane];
            for kz in 0..k[0] {
                let (z0, z1) = valid_range(xd.d, out.d, kz, spec);
                for ky in 0..k[1] {
                    let (y0, y1) = valid_range(xd.h, out.h, ky, spec);
                    for kx in 0..k[2] {
                        let (x0, x1) = valid_range(xd.w, out.w, kx, spec);
                        let mut acc = T::zero();
                        for oz in z0..z1 {
                            let iz = oz * spec.stride + kz - spec.padding;
                            for oy in y0..y1 {
                                let iy = oy * spec.stride + ky - spec.padding;
                                let grow = &gy[(oz * out.h + oy) * out.w..][..out.w];
                                let srow = &src[(iz * xd.h + iy) * xd.w..][..xd.w];
                                if spec.stride == 1 {
                                    let ix0 = x0 + kx - spec.padding;
                                    let n = x1 - x0;
                                    acc += grow[x0..x1]
                                        .iter()
                                        .zip(&srow[ix0..ix0 + n])
                                        .fold(T::zero(), |a, (&g, &s)| a + g * s);
                                } else {
                                    for ox in x0..x1 {
                                        let ix = ox * spec.stride + kx - spec.padding;
                                        acc += grow[ox] * srow[ix];
                                    }
                                }
                            }
                        }
                        dst[(kz * k[1] + ky) * k[2] + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

/// Layout shared by the stride-1 kernels.
///
/// The input is zero-padded once; output voxel `(z, y, x)` then reads padded
/// voxel `(z + kz, y + ky, x + kx)`, so in the flattened padded grid every
/// kernel tap is a constant offset and each tap becomes one long contiguous
/// multiply-add.
struct Shifted {
    /// Padded spatial dims.
    p: [usize; 3],
    /// Length of the flattened output index range in padded coordinates.
    len: usize,
    offsets: Vec<usize>,
}

impl Shifted {
    fn new(g: &ConvGeometry) -> Self {
        let pad = g.spec.padding;
        let p = [g.x.d + 2 * pad, g.x.h + 2 * pad, g.x.w + 2 * pad];
        let (o, k) = (g.out, g.k);
        let len = ((o.d - 1) * p[1] + (o.h - 1)) * p[2] + o.w;
        let mut offsets = Vec::with_capacity(k[0] * k[1] * k[2]);
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    offsets.push((kz * p[1] + ky) * p[2] + kx);
                }
            }
        }
        Shifted { p, len, offsets }
    }

    fn plane(&self) -> usize {
        self.p[0] * self.p[1] * self.p[2]
    }

    /// Zero-pads every channel of one sample.
    fn pad<T: Real>(&self, g: &ConvGeometry, x: &[T], channels: usize) -> Vec<T> {
        let pad = g.spec.padding;
        let (xd, plane) = (g.x, self.plane());
        let mut out = vec![T::zero(); channels * plane];
        for c in 0..channels {
            for z in 0..xd.d {
                for y in 0..xd.h {
                    let src = &x[((c * xd.d + z) * xd.h + y) * xd.w..][..xd.w];
                    let dst = c * plane + ((z + pad) * self.p[1] + y + pad) * self.p[2] + pad;
                    out[dst..dst + xd.w].copy_from_slice(src);
                }
            }
        }
        out
    }

    fn out_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.p[1] + y) * self.p[2] + x
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight interleaved partial sums (fixed order, vectorizable).
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}

fn conv3d_forward_shifted<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ConvGeometry { x: xd, out, .. } = *g;
    let sh = Shifted::new(g);
    let ksz = sh.offsets.len();
    let in_sample = xd.c * xd.spatial();
    let out_plane = out.spatial();
    let padded: Vec<Vec<T>> = (0..xd.n)
        .into_par_iter()
        .map(|n| sh.pad(g, &x[n * in_sample..][..in_sample], xd.c))
        .collect();
    let mut y = vec![T::zero(); out.n * out.c * out_plane];
    y.par_chunks_mut(out_plane).enumerate().for_each(|(plane, dst)| {
        let (n, co) = (plane / out.c, plane % out.c);
        let mut acc = vec![T::zero(); sh.len];
        for ci in 0..xd.c {
            let src = &padded[n][ci * sh.plane()..][..sh.plane()];
            let wk = &w[(co * xd.c + ci) * ksz..][..ksz];
            for (&wv, &off) in wk.iter().zip(&sh.offsets) {
                axpy(&mut acc, wv, &src[off..off + sh.len]);
            }
        }
        let b = bias.map_or(T::zero(), |b| b[co]);
        for z in 0..out.d {
            for yy in 0..out.h {
                let row = &acc[sh.out_index(z, yy, 0)..][..out.w];
                let drow = &mut dst[(z * out.h + yy) * out.w..][..out.w];
                for (d, &v) in drow.iter_mut().zip(row) {
                    *d = v + b;
                }
            }
        }
    });
    y
}

/// Scatters one output-gradient plane into the flattened padded index range.
fn spread<T: Real>(sh: &Shifted, out: Dims5, dy: &[T]) -> Vec<T> {
    let mut full = vec![T::zero(); sh.len];
    for z in 0..out.d {
        for y in 0..out.h {
            let i = sh.out_index(z, y, 0);
            full[i..i + out.w].copy_from_slice(&dy[(z * out.h + y) * out.w..][..out.w]);
        }
    }
    full
}

fn conv3d_backward_input_shifted<T: Real>(g: &ConvGeometry, dy: &[T], w: &[T]) -> Vec<T> {
    let ConvGeometry { x: xd, out, spec, .. } = *g;
    let sh = Shifted::new(g);
    let ksz = sh.offsets.len();
    let out_plane = out.spatial();
    let spread_dy: Vec<Vec<T>> = (0..out.n * out.c)
        .into_par_iter()
        .map(|i| spread(&sh, out, &dy[i * out_plane..][..out_plane]))
        .collect();
    let in_plane = xd.spatial();
    let pad = spec.padding;
    let mut dx = vec![T::zero(); xd.n * xd.c * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(plane, dst)| {
        let (n, ci) = (plane / xd.c, plane % xd.c);
        let mut acc = vec![T::zero(); sh.plane()];
        for co in 0..out.c {
            let gy = &spread_dy[n * out.c + co];
            let wk = &w[(co * xd.c + ci) * ksz..][..ksz];
            for (&wv, &off) in wk.iter().zip(&sh.offsets) {
                axpy(&mut acc[off..off + sh.len], wv, gy);
            }
        }
        for z in 0..xd.d {
            for y in 0..xd.h {
                let src = &acc[((z + pad) * sh.p[1] + y + pad) * sh.p[2] + pad..][..xd.w];
                dst[(z * xd.h + y) * xd.w..][..xd.w].copy_from_slice(src);
            }
        }
    });
    dx
}

fn conv3d_backward_weight_shifted<T: Real>(g: &ConvGeometry, dy: &[T], x: &[T]) -> Vec<T> {
    let ConvGeometry { x: xd, out, .. } = *g;
    let sh = Shifted::new(g);
    let ksz = sh.offsets.len();
    let in_sample = xd.c * xd.spatial();
    let out_plane = out.spatial();
    let padded: Vec<Vec<T>> = (0..xd.n)
        .into_par_iter()
        .map(|n| sh.pad(g, &x[n * in_sample..][..in_sample], xd.c))
        .collect();
    let spread_dy: Vec<Vec<T>> = (0..out.n * out.c)
        .into_par_iter()
        .map(|i| spread(&sh, out, &dy[i * out_plane..][..out_plane]))
        .collect();
    let mut dw = vec![T::zero(); out.c * xd.c * ksz];
    dw.par_chunks_mut(ksz).enumerate().for_each(|(pair, dst)| {
        let (co, ci) = (pair / xd.c, pair % xd.c);
        for n in 0..xd.n {
            let gy = &spread_dy[n * out.c + co];
            let src = &padded[n][ci * sh.plane()..][..sh.plane()];
            for (d, &off) in dst.iter_mut().zip(&sh.offsets) {
                *d += dot(gy, &src[off..off + sh.len]);
            }
        }
    });
    dw
}

/// Cross-correlation with zero padding.
pub(crate) fn conv3d_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    if g.spec.stride == 1 {
        conv3d_forward_shifted(g, x, w, bias)
    } else {
        conv3d_forward_direct(g, x, w, bias)
    }
}

pub(crate) fn conv3d_backward_input<T: Real>(g: &ConvGeometry, dy: &[T], w: &[T]) -> Vec<T> {
    if g.spec.stride == 1 {
        conv3d_backward_input_shifted(g, dy, w)
    } else {
        conv3d_backward_input_direct(g, dy, w)
    }
}

pub(crate) fn conv3d_backward_weight<T: Real>(g: &ConvGeometry, dy: &[T], x: &[T]) -> Vec<T> {
    if g.spec.stride == 1 {
        conv3d_backward_weight_shifted(g, dy, x)
    } else {
        conv3d_backward_weight_direct(g, dy, x)
    }
}
pub(crate) fn conv3d_backward_bias<T: Real>(out: Dims5, dy: &[T]) -> Vec<T> {
    let plane = out.spatial();
    (0..out.c)
        .into_par_iter()
        .map(|co| {
            let mut acc = T::zero();
            for n in 0..out.n {
                for &v in &dy[(n * out.c + co) * plane..][..plane] {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

/// Max pooling; returns the output and, per output element, the flat input
/// index of the first (lowest index) maximum in its window.
pub(crate) fn maxpool3d_forward<T: Real>(
    xd: Dims5,
    x: &[T],
    window: usize,
    stride: usize,
) -> Result<(Dims5, Vec<T>, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::Contract("maxpool window and stride must be >= 1".into()));
    }
    for (name, len) in [("D", xd.d), ("H", xd.h), ("W", xd.w)] {
        if len % stride != 0 || len < window {
            return Err(Error::Shape(format!(
                "maxpool3d: spatial dim {name}={len} not divisible by stride {stride}"
            )));
        }
    }
    let od = (xd.d - window) / stride + 1;
    let oh = (xd.h - window) / stride + 1;
    let ow = (xd.w - window) / stride + 1;
    let out = Dims5 {
        n: xd.n,
        c: xd.c,
        d: od,
        h: oh,
        w: ow,
    };
    let in_plane = xd.spatial();
    let out_plane = out.spatial();
    let mut y = vec![T::zero(); xd.n * xd.c * out_plane];
    let mut arg = vec![0usize; y.len()];
    y.par_chunks_mut(out_plane)
        .zip(arg.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(plane, (dst, adst))| {
            let base = plane * in_plane;
            let src = &x[base..base + in_plane];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for dz in 0..window {
                            let iz = oz * stride + dz;
                            for dy in 0..window {
                                let iy = oy * stride + dy;
                                for dx in 0..window {
                                    let ix = ox * stride + dx;
                                    let i = (iz * xd.h + iy) * xd.w + ix;
                                    // window scanned in increasing flat order, so a
                                    // strict comparison keeps the first maximum
                                    let v = src[i];
                                    if best_i == usize::MAX || v > best {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = (oz * oh + oy) * ow + ox;
                        dst[o] = best;
                        adst[o] = base + best_i;
                    }
                }
            }
        });
    Ok((out, y, arg))
}

/// Per-axis linear interpolation taps for align-corners=false upsampling.
fn linear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_trilinear_forward<T: Real>(
    xd: Dims5,
    x: &[T],
    factor: usize,
) -> (Dims5, Vec<T>) {
    let out = Dims5 {
        n: xd.n,
        c: xd.c,
        d: xd.d * factor,
        h: xd.h * factor,
        w: xd.w * factor,
    };
    let tz = linear_taps(xd.d, factor);
    let ty = linear_taps(xd.h, factor);
    let tx: Vec<(usize, usize, T, T)> = linear_taps(xd.w, factor)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::of(wa), T::of(wb)))
        .collect();
    let in_plane = xd.spatial();
    let out_plane = out.spatial();
    let mut y = vec![T::zero(); xd.n * xd.c * out_plane];
    y.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &x[plane * in_plane..][..in_plane];
            for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let corners = [
                        ((z0 * xd.h + y0) * xd.w, T::of(wz0 * wy0)),
                        ((z0 * xd.h + y1) * xd.w, T::of(wz0 * wy1)),
                        ((z1 * xd.h + y0) * xd.w, T::of(wz1 * wy0)),
                        ((z1 * xd.h + y1) * xd.w, T::of(wz1 * wy1)),
                    ];
                    let drow = &mut dst[(oz * out.h + oy) * out.w..][..out.w];
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let mut acc = T::zero();
                        for &(row, wzy) in &corners {
                            acc += wzy * (wx0 * src[row + x0] + wx1 * src[row + x1]);
                        }
                        drow[ox] = acc;
                    }
                }
            }
        });
    (out, y)
}

pub(crate) fn upsample_trilinear_backward<T: Real>(
    xd: Dims5,
    dy: &[T],
    factor: usize,
) -> Vec<T> {
    let (od, oh, ow) = (xd.d * factor, xd.h * factor, xd.w * factor);
    let tz = linear_taps(xd.d, factor);
    let ty = linear_taps(xd.h, factor);
    let tx: Vec<(usize, usize, T, T)> = linear_taps(xd.w, factor)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::of(wa), T::of(wb)))
        .collect();
    let in_plane = xd.spatial();
    let out_plane = od * oh * ow;
    let mut dx = vec![T::zero(); xd.n * xd.c * in_plane];
    dx.par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &dy[plane * out_plane..][..out_plane];
            for (oz, &(z0, z1, wz0, wz1)) in tz.iter().enumerate() {
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let corners = [
                        ((z0 * xd.h + y0) * xd.w, T::of(wz0 * wy0)),
                        ((z0 * xd.h + y1) * xd.w, T::of(wz0 * wy1)),
                        ((z1 * xd.h + y0) * xd.w, T::of(wz1 * wy0)),
                        ((z1 * xd.h + y1) * xd.w, T::of(wz1 * wy1)),
                    ];
                    let grow = &src[(oz * oh + oy) * ow..][..ow];
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let g = grow[ox];
                        for &(row, wzy) in &corners {
                            dst[row + x0] += wzy * wx0 * g;
                            dst[row + x1] += wzy * wx1 * g;
                        }
                    }
                }
            }
        });
    dx
}

/// Saved statistics of an instance-norm forward pass.
#[derive(Debug)]
pub(crate) struct InstanceNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm_forward<T: Real>(
    xd: Dims5,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, InstanceNormCache<T>) {
    let plane = xd.spatial();
    let m = T::of(plane as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let inv_std: Vec<T> = y
        .par_chunks_mut(plane)
        .zip(xhat.par_chunks_mut(plane))
        .enumerate()
        .map(|(p, (dst, hat))| {
            let c = p % xd.c;
            let src = &x[p * plane..][..plane];
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            for ((d, h), &s) in dst.iter_mut().zip(hat.iter_mut()).zip(src) {
                *h = (s - mean) * inv;
                *d = gamma[c] * *h + beta[c];
            }
            inv
        })
        .collect();
    (y, InstanceNormCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn instance_norm_backward<T: Real>(
    xd: Dims5,
    dy: &[T],
    gamma: &[T],
    cache: &InstanceNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = xd.spatial();
    let m = T::of(plane as f64);
    let mut dx = vec![T::zero(); dy.len()];
    dx.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
        let c = p % xd.c;
        let gy = &dy[p * plane..][..plane];
        let hat = &cache.xhat[p * plane..][..plane];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &h) in gy.iter().zip(hat) {
            sum_g += g * gamma[c];
            sum_gx += g * gamma[c] * h;
        }
        let inv = cache.inv_std[p];
        for ((d, &g), &h) in dst.iter_mut().zip(gy).zip(hat) {
            *d = inv * (g * gamma[c] - sum_g / m - h * sum_gx / m);
        }
    });
    let mut dgamma = vec![T::zero(); xd.c];
    let mut dbeta = vec![T::zero(); xd.c];
    for p in 0..xd.n * xd.c {
        let c = p % xd.c;
        let gy = &dy[p * plane..][..plane];
        let hat = &cache.xhat[p * plane..][..plane];
        for (&g, &h) in gy.iter().zip(hat) {
            dgamma[c] += g * h;
            dbeta[c] += g;
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn shifted_conv_matches_direct_loops() {
        let mut seed = 7;
        let cases = [
            ([2, 3, 5, 6, 4], [4, 3, 3, 3, 3], Conv3dSpec::same(3)),
            ([1, 2, 7, 5, 6], [3, 2, 2, 3, 1], Conv3dSpec { stride: 1, padding: 1 }),
            ([2, 2, 3, 4, 5], [2, 2, 3, 3, 3], Conv3dSpec { stride: 1, padding: 2 }),
            ([2, 4, 4, 4, 4], [5, 4, 1, 1, 1], Conv3dSpec::valid()),
            ([1, 1, 9, 3, 3], [2, 1, 3, 3, 3], Conv3dSpec { stride: 1, padding: 0 }),
        ];
        for (xs, ws, spec) in cases {
            let g = conv3d_geometry(&xs, &ws, Some(ws[0]), spec).unwrap();
            let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|_| lcg(&mut seed)).collect();
            let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|_| lcg(&mut seed)).collect();
            let b: Vec<f64> = (0..ws[0]).map(|_| lcg(&mut seed)).collect();
            let dy: Vec<f64> = (0..g.out.n * g.out.c * g.out.spatial()).map(|_| lcg(&mut seed)).collect();
            let close = |a: &[f64], b: &[f64]| {
                assert_eq!(a.len(), b.len());
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() < 1e-12, "{u} vs {v}");
                }
            };
            close(&conv3d_forward_shifted(&g, &x, &w, Some(&b)), &conv3d_forward_direct(&g, &x, &w, Some(&b)));
            close(&conv3d_backward_input_shifted(&g, &dy, &w), &conv3d_backward_input_direct(&g, &dy, &w));
            close(&conv3d_backward_weight_shifted(&g, &dy, &x), &conv3d_backward_weight_direct(&g, &dy, &x));
        }
    }

    #[test]
    fn valid_range_covers_padding() {
        let spec = Conv3dSpec::same(3);
        // input 5, output 5, kernel offset 0 reads o - 1, valid for o in [1, 5)
        assert_eq!(valid_range(5, 5, 0, spec), (1, 5));
        assert_eq!(valid_range(5, 5, 1, spec), (0, 5));
        assert_eq!(valid_range(5, 5, 2, spec), (0, 4));
        let strided = Conv3dSpec {
            stride: 2,
            padding: 1,
        };
        // output 3 from input 5: o*2 + k - 1
        assert_eq!(valid_range(5, 3, 0, strided), (1, 3));
        assert_eq!(valid_range(5, 3, 2, strided), (0, 2));
        assert_eq!(valid_range(5, 3, 1, strided), (0, 3));
    }

    #[test]
    fn linear_taps_align_corners_false() {
        let taps = linear_taps(2, 2);
        // outputs map to src coords 0 (clamped), 0.25, 0.75, 1.25 -> clamped to last
        assert_eq!(taps[0], (0, 1, 1.0, 0.0));
        assert_eq!(taps[1], (0, 1, 0.75, 0.25));
        assert_eq!(taps[2], (0, 1, 0.25, 0.75));
        assert_eq!(taps[3].0, 1);
        assert_eq!(taps[3].1, 1);
    }
}
