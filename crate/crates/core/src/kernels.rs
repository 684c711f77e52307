//! Slice-level numeric kernels shared by the tape's forward and backward passes.

use crate::tensor::Float;

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// Geometry of one 2-D convolution over a single batch item.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `(C, H, W)` item into a `(C*k*k, OH*OW)` column matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for p in 0..g.k {
            for q in 0..g.k {
                let row = (c * g.k + p) * g.k + q;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + p) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + q) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `(C, H, W)`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for p in 0..g.k {
            for q in 0..g.k {
                let row = (c * g.k + p) * g.k + q;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + p) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + q) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for one output axis of a half-pixel-centre bilinear resize:
/// `(lower index, upper index, weight of upper)`.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps<T> {
    taps: Vec<(usize, usize, T)>,
}

impl<T: Float> AxisTaps<T> {
    /// Samples `out` positions from the window `[start, start + len)` of an axis.
    pub fn new(start: usize, len: usize, out: usize) -> Self {
        let scale = len as f64 / out as f64;
        let max = (len - 1) as f64;
        let taps = (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (start + lo, start + hi, T::from_f64(src - lo as f64))
            })
            .collect();
        AxisTaps { taps }
    }
}

/// Bilinear resize of a window of one plane (row stride `src_w`).
pub(crate) fn resize_plane<T: Float>(
    src: &[T],
    src_w: usize,
    rows: &AxisTaps<T>,
    cols: &AxisTaps<T>,
    dst: &mut [T],
) {
    let ow = cols.taps.len();
    for (oy, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
        let r0 = &src[y0 * src_w..];
        let r1 = &src[y1 * src_w..];
        let out = &mut dst[oy * ow..(oy + 1) * ow];
        for (slot, &(x0, x1, fx)) in out.iter_mut().zip(&cols.taps) {
            let top = r0[x0] * (T::ONE - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (T::ONE - fx) + r1[x1] * fx;
            *slot = top * (T::ONE - fy) + bottom * fy;
        }
    }
}

/// Adjoint of [`resize_plane`].
pub(crate) fn resize_plane_backward<T: Float>(
    grad_out: &[T],
    src_w: usize,
    rows: &AxisTaps<T>,
    cols: &AxisTaps<T>,
    grad_src: &mut [T],
) {
    let ow = cols.taps.len();
    for (oy, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            let gt = g * (T::ONE - fy);
            let gb = g * fy;
            grad_src[y0 * src_w + x0] += gt * (T::ONE - fx);
            grad_src[y0 * src_w + x1] += gt * fx;
            grad_src[y1 * src_w + x0] += gb * (T::ONE - fx);
            grad_src[y1 * src_w + x1] += gb * fx;
        }
    }
}
