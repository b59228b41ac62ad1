//! Slice-level numeric kernels shared by the tape ops and the tape-free
//! tensor methods.

use crate::scalar::Scalar;

pub(crate) fn softmax_channels<T: Scalar>(data: &mut [T], n: usize, c: usize, hw: usize) {
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let mut m = data[base + i];
            for ch in 1..c {
                m = m.max(data[base + ch * hw + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * hw + i] - m).exp();
                data[base + ch * hw + i] = e;
                z += e;
            }
            for ch in 0..c {
                data[base + ch * hw + i] /= z;
            }
        }
    }
}

/// Source taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: T,
    pub w_hi: T,
}

/// Align-corners-false sampling positions, negative sources clamped to 0.
pub(crate) fn resize_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: T::lit(1.0 - frac),
                w_hi: T::lit(frac),
            }
        })
        .collect()
}

pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ty) in ty.iter().enumerate() {
            let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
            for (ox, tx) in tx.iter().enumerate() {
                let top = r0[tx.lo] * tx.w_lo + r0[tx.hi] * tx.w_hi;
                let bot = r1[tx.lo] * tx.w_lo + r1[tx.hi] * tx.w_hi;
                dst[oy * ow + ox] = top * ty.w_lo + bot * ty.w_hi;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ty) in ty.iter().enumerate() {
            for (ox, tx) in tx.iter().enumerate() {
                let v = gsrc[oy * ow + ox];
                dst[ty.lo * w + tx.lo] += v * ty.w_lo * tx.w_lo;
                dst[ty.lo * w + tx.hi] += v * ty.w_lo * tx.w_hi;
                dst[ty.hi * w + tx.lo] += v * ty.w_hi * tx.w_lo;
                dst[ty.hi * w + tx.hi] += v * ty.w_hi * tx.w_hi;
            }
        }
    }
    dx
}

/// Geometry of a square-kernel convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one sample `cin×h×w` into `(cin·k·k) × (oh·ow)` columns.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run with zero padding at both ends
                        let shift = kx as isize - g.pad as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `cin×h×w` sample.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
