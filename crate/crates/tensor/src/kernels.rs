//! Raw convolution and pooling kernels over contiguous buffers.
//!
//! Convolutions lower to `im2col` + GEMM per batch item. All loops run in a
//! fixed order so results are bit-reproducible on a given machine.

use crate::real::gemm;
use crate::Real;

/// Geometry of a sliding window over one `[c, h, w]` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_cols(g: &Window, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    let hi = if g.w + g.pad <= kx {
        0
    } else {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(img: &[T], g: &Window, cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[start + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Window, img: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[start + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv: `x [b, c, h, w]`, `w [cout, c, kh, kw]` → `[b, cout, oh, ow]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.positions());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); batch * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight, false, src, false, ob, false);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, p) = (g.rows(), g.positions());
    let in_len = g.c * g.h * g.w;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = vec![T::zero(); k * p];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &grad_out[b * cout * p..(b + 1) * cout * p];
        for (co, chunk) in gb.chunks(p).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(cout, p, k, gb, false, src, true, &mut dw, true);
        if need_dx {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, cout, p, weight, true, gb, false, dxb, true);
            } else {
                gemm(k, cout, p, weight, true, gb, false, &mut dcols, false);
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed conv: `x [b, cin, h, w]`, `w [cin, cout, k, k]`.
///
/// `g` describes the *output* image `[cout, oh_t, ow_t]` as the input of the
/// adjoint convolution, so `g.oh`/`g.ow` equal the extents of `x`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &Window,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.positions());
    let out_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); k * p];
    for b in 0..batch {
        let xb = &x[b * cin * p..(b + 1) * cin * p];
        gemm(k, cin, p, weight, true, xb, false, &mut cols, false);
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&cols, g, ob);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(g.h * g.w).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &Window,
    weight: &[T],
    grad_out: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, p) = (g.rows(), g.positions());
    let out_len = g.c * g.h * g.w;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); cin * k];
    let mut db = vec![T::zero(); g.c];
    let mut dcols = vec![T::zero(); k * p];
    for b in 0..batch {
        let gb = &grad_out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in gb.chunks(g.h * g.w).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        im2col(gb, g, &mut dcols);
        let xb = &x[b * cin * p..(b + 1) * cin * p];
        gemm(cin, p, k, xb, false, &dcols, true, &mut dw, true);
        if need_dx {
            let dxb = &mut dx[b * cin * p..(b + 1) * cin * p];
            gemm(cin, k, p, weight, false, &dcols, false, dxb, false);
        }
    }
    (dx, dw, db)
}

/// Max pooling; returns values and, per output, the flat input index of the
/// first maximal element in scan order.
pub(crate) fn max_pool<T: Real>(x: &[T], planes: usize, g: &Window) -> (Vec<T>, Vec<usize>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = Vec::with_capacity(planes * plane_out);
    let mut arg = Vec::with_capacity(planes * plane_out);
    for pl in 0..planes {
        let base = pl * plane_in;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = base + oy * g.stride * g.w + ox * g.stride;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let idx = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool<T: Real>(x: &[T], planes: usize, g: &Window) -> Vec<T> {
    let plane_in = g.h * g.w;
    let norm = T::lit((g.kh * g.kw) as f64);
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    for pl in 0..planes {
        let base = pl * plane_in;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.kh {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.kw {
                        acc += x[row + kx];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(grad: &[T], planes: usize, g: &Window) -> Vec<T> {
    let plane_in = g.h * g.w;
    let norm = T::lit((g.kh * g.kw) as f64);
    let mut dx = vec![T::zero(); planes * plane_in];
    for pl in 0..planes {
        let base = pl * plane_in;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = grad[(pl * g.oh + oy) * g.ow + ox] / norm;
                for ky in 0..g.kh {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.kw {
                        dx[row + kx] += gv;
                    }
                }
            }
        }
    }
    dx
}
