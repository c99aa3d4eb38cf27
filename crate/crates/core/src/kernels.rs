//! Low level loops behind the graph ops: patch extraction, pooling and a
//! per-sample parallel map.

use alloc::vec::Vec;

use crate::tensor::Real;

/// Geometry of a square-kernel convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the image already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` falls inside
/// the image, as a half-open range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    // Largest ox with ox·stride + kx − pad ≤ width − 1.
    let hi = if g.width + g.pad < kx + 1 {
        0
    } else {
        ((g.width + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    };
    (lo.min(hi), hi)
}

/// Unfolds `src` (`C×H×W`) into `dst` (`C·k·k × out_h·out_w`).
pub(crate) fn im2col<T: Real>(src: &[T], g: &ConvGeom, dst: &mut [T]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut dst[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src_row[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into `dst` (`C×H×W`).
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, dst: &mut [T]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst_row[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over one `C×H×W` sample with implicit `-inf` padding.
/// Returns the pooled values and, per output element, the flat index of the
/// winning input element within its channel plane.
pub(crate) fn max_pool<T: Real>(src: &[T], g: &ConvGeom) -> (Vec<T>, Vec<u32>) {
    let plane_out = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(g.channels * plane_out);
    let mut arg = Vec::with_capacity(g.channels * plane_out);
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = u32::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let idx = iy as usize * g.width + ix as usize;
                        let v = plane[idx];
                        if best_idx == u32::MAX || v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Maps `f` over `0..n`, in parallel when the `std` feature is enabled.
/// Result order always matches index order.
#[cfg(feature = "std")]
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if n <= 1 {
        return (0..n).map(f).collect();
    }
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "std"))]
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}
