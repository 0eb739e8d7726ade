//! Per-image convolution kernels. Images are `[C, H, W]` slices.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geom {
    /// Output extent of a padded strided window scan, `None` when the window
    /// does not fit.
    pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        (padded >= k).then(|| (padded - k) / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.width as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution of one image; `w` is `[C, 1, kh, kw]`.
pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &Geom, out: &mut [T]) {
    let (h, wd) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dst = &mut out[c * g.out_h * g.out_w..(c + 1) * g.out_h * g.out_w];
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let mut acc = T::zero();
                for ki in 0..g.kh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < wd {
                            acc += plane[ii as usize * g.width + jj as usize] * ker[ki * g.kw + kj];
                        }
                    }
                }
                dst[oi * g.out_w + oj] = acc;
            }
        }
    }
}

/// Accumulates input and kernel gradients of [`depthwise_forward`].
pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &Geom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (h, wd) = (g.height as isize, g.width as isize);
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.channels {
        let xoff = c * g.height * g.width;
        let koff = c * g.kh * g.kw;
        let ooff = c * g.out_h * g.out_w;
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let d = dout[ooff + oi * g.out_w + oj];
                if d == T::zero() {
                    continue;
                }
                for ki in 0..g.kh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= wd {
                            continue;
                        }
                        let xi = xoff + ii as usize * g.width + jj as usize;
                        let ki_ = koff + ki * g.kw + kj;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += d * w[ki_];
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[ki_] += d * x[xi];
                        }
                    }
                }
            }
        }
    }
}
