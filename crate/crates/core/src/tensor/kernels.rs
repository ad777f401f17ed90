//! Raw convolution kernels on per-sample slices. Shape checking happens in the
//! tape ops that call these.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
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
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A 1x1 stride-1 unpadded conv reads the input directly as its column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn cols_len(&self) -> usize {
        self.patch() * self.out_pixels()
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = gain * conv(x, w) (+ bias)` for one sample. `out` is overwritten.
pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    gain: T,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    let p = g.out_pixels();
    let kk = g.patch();
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        scratch.resize(g.cols_len(), T::zero());
        im2col(g, x, scratch);
        scratch
    };
    T::gemm(g.cout, kk, p, gain, w, kk, 1, cols, p, 1, T::zero(), out, p, 1);
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate().take(g.cout) {
            for v in &mut out[o * p..(o + 1) * p] {
                *v += bo;
            }
        }
    }
}

/// Accumulates gradients of one sample's conv into `dx`, `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gain: T,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let p = g.out_pixels();
    let kk = g.patch();
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate().take(g.cout) {
            *d += dout[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            scratch.resize(g.cols_len(), T::zero());
            im2col(g, x, scratch);
            scratch
        };
        // dw[o, j] += gain * sum_p dout[o, p] * cols[j, p]
        T::gemm(g.cout, p, kk, gain, dout, p, 1, cols, 1, p, T::one(), dw, kk, 1);
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            T::gemm(kk, g.cout, p, gain, w, 1, kk, dout, p, 1, T::one(), dx, p, 1);
        } else {
            scratch.resize(g.cols_len(), T::zero());
            T::gemm(kk, g.cout, p, gain, w, 1, kk, dout, p, 1, T::zero(), scratch, p, 1);
            col2im(g, scratch, dx);
        }
    }
}
