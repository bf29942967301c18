//! Raw convolution kernels built on im2col + GEMM.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `lo..hi` whose input index `o * stride + off - pad` lies in `0..len`.
fn valid(off: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(off).div_ceil(stride).min(out);
    let hi = if len + pad > off { ((len + pad - off - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one image `[c_in, h, w]` into `[c_in*k*k, out_h*out_w]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid(ky, g.pad, g.stride, g.h, oh);
            for kx in 0..g.k {
                let (xlo, xhi) = valid(kx, g.pad, g.stride, g.w, ow);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    out_row[..xlo].fill(T::zero());
                    out_row[xhi..].fill(T::zero());
                    let first = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[xlo..xhi].copy_from_slice(&src_row[first..first + xhi - xlo]);
                    } else {
                        for (v, &s) in out_row[xlo..xhi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Folds `[c_in*k*k, out_h*out_w]` back onto an image, accumulating.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid(ky, g.pad, g.stride, g.h, oh);
            for kx in 0..g.k {
                let (xlo, xhi) = valid(kx, g.pad, g.stride, g.w, ow);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let first = xlo * g.stride + kx - g.pad;
                    let src_row = &src[oy * ow + xlo..oy * ow + xhi];
                    for (d, &s) in dst_row[first..].iter_mut().step_by(g.stride).zip(src_row) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let kdim = g.patch();
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    let in_len = g.c_in * g.h * g.w;
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let on = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        T::gemm(
            g.c_out,
            kdim,
            plane,
            T::one(),
            w,
            (kdim as isize, 1),
            b,
            (plane as isize, 1),
            T::zero(),
            on,
            (plane as isize, 1),
        );
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let kdim = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.c_out * kdim]);
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kdim * plane }];
    let mut dcols = vec![T::zero(); if pointwise || !want_dx { 0 } else { kdim * plane }];
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(dw) = dw.as_mut() {
            let b: &[T] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dw[c_out, kdim] += dy[c_out, plane] * cols^T[plane, kdim]
            T::gemm(
                g.c_out,
                plane,
                kdim,
                T::one(),
                dyn_,
                (plane as isize, 1),
                b,
                (1, plane as isize),
                T::one(),
                dw,
                (kdim as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            // dcols[kdim, plane] = w^T[kdim, c_out] * dy[c_out, plane]
            if pointwise {
                T::gemm(
                    kdim,
                    g.c_out,
                    plane,
                    T::one(),
                    w,
                    (1, kdim as isize),
                    dyn_,
                    (plane as isize, 1),
                    T::one(),
                    dxn,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    kdim,
                    g.c_out,
                    plane,
                    T::one(),
                    w,
                    (1, kdim as isize),
                    dyn_,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                col2im(g, &dcols, dxn);
            }
        }
    }
    (dx, dw)
}
