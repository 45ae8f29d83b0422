//! Index arithmetic and dense kernels shared by the forward and backward passes.

use crate::real::Real;
use crate::tensor::{numel, strides_of};

/// Calls `f(dst_index, src_offset)` for every element of `shape` in row-major order,
/// where the source offset advances by `strides` (zero strides broadcast).
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut i = 0usize;
    loop {
        let mut o = base;
        for _ in 0..inner_len {
            f(i, o);
            i += 1;
            o += inner_stride;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `src` while iterating over the (larger) `dst` shape.
pub(crate) fn broadcast_strides(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let pad = dst.len() - src.len();
    let src_strides = strides_of(src);
    let mut out = vec![0; dst.len()];
    for i in 0..src.len() {
        let (s, d) = (src[i], dst[i + pad]);
        if s == d {
            out[i + pad] = if s == 1 { 0 } else { src_strides[i] };
        } else if s == 1 {
            out[i + pad] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Gathers `src` (shape `src_shape`) into the broadcast shape `dst`.
pub(crate) fn broadcast_to<T: Real>(src: &[T], src_shape: &[usize], dst: &[usize]) -> Vec<T> {
    if src_shape == dst {
        return src.to_vec();
    }
    let strides = broadcast_strides(src_shape, dst).expect("validated broadcast");
    let mut out = vec![T::zero(); numel(dst)];
    for_each_offset(dst, &strides, |i, o| out[i] = src[o]);
    out
}

/// Sums a gradient of shape `dst` back down to the broadcast source shape.
pub(crate) fn reduce_to<T: Real>(grad: &[T], dst: &[usize], src_shape: &[usize]) -> Vec<T> {
    if src_shape == dst {
        return grad.to_vec();
    }
    let strides = broadcast_strides(src_shape, dst).expect("validated broadcast");
    let mut out = vec![T::zero(); numel(src_shape)];
    for_each_offset(dst, &strides, |i, o| out[o] += grad[i]);
    out
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Geometry of a channels-last 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source pixel of kernel tap (ky, kx) for output (oy, ox), if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds a `[B, H, W, C]` input into `[B·Ho·Wo, kh·kw·C]` patch rows.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.in_channels;
    let mut cols = vec![T::zero(); g.rows() * g.patch_len()];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &x[b * g.height * g.width * c..(b + 1) * g.height * g.width * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * g.patch_len()..(row + 1) * g.patch_len()];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let tap = (ky * g.kernel_w + kx) * c;
                            let src = (y * g.width + x) * c;
                            dst[tap..tap + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-row gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.in_channels;
    let mut x = vec![T::zero(); g.batch * g.height * g.width * c];
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.height * g.width * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * g.patch_len()..(row + 1) * g.patch_len()];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let tap = (ky * g.kernel_w + kx) * c;
                            let dst = base + (y * g.width + xx) * c;
                            for ch in 0..c {
                                x[dst + ch] += src[tap + ch];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        assert_eq!(broadcast_strides(&[1, 3], &[2, 3]), Some(vec![0, 1]));
    }

    #[test]
    fn offsets_follow_strides() {
        let mut seen = Vec::new();
        for_each_offset(&[2, 3], &[1, 2], |i, o| seen.push((i, o)));
        assert_eq!(seen, vec![(0, 0), (1, 2), (2, 4), (3, 1), (4, 3), (5, 5)]);
    }

    #[test]
    fn reduce_is_adjoint_of_broadcast() {
        let src = [1.0f64, 2.0, 3.0];
        let b = broadcast_to(&src, &[3], &[2, 3]);
        assert_eq!(b, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r = reduce_to(&b, &[2, 3], &[1, 3]);
        assert_eq!(r, vec![2.0, 4.0, 6.0]);
    }
}
