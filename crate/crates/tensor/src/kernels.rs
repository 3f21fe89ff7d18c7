//! Dense kernels shared by the tape's forward and backward passes.
//!
//! Every output element of a matrix product is accumulated in a fixed order
//! (`c + a₀b₀ + a₁b₁ + …`, ascending inner index) regardless of tiling, so
//! results are bit-for-bit reproducible and independent of batch size.

use crate::scalar::Real;

const MR: usize = 4;
const NR: usize = 16;

/// `c[n×m] += A · b[k×m]` where `A[i][p] = a[i·rs + p·cs]`.
fn gemm_strided<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    let mut i0 = 0;
    while i0 < n {
        let rows = MR.min(n - i0);
        let mut j0 = 0;
        while j0 < m {
            let cols = NR.min(m - j0);
            if rows == MR && cols == NR {
                tile_full(a, rs, cs, b, c, i0, j0, k, m);
            } else {
                tile_edge(a, rs, cs, b, c, i0, j0, rows, cols, k, m);
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile_full<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T], i0: usize, j0: usize, k: usize, m: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * m + j0..(i0 + r) * m + j0 + NR]);
    }
    for p in 0..k {
        let bp: &[T; NR] = b[p * m + j0..p * m + j0 + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[(i0 + r) * rs + p * cs];
            for j in 0..NR {
                row[j] = row[j] + av * bp[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * m + j0..(i0 + r) * m + j0 + NR].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_edge<T: Real>(
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
    i0: usize,
    j0: usize,
    rows: usize,
    cols: usize,
    k: usize,
    m: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for r in 0..rows {
        acc[r][..cols].copy_from_slice(&c[(i0 + r) * m + j0..(i0 + r) * m + j0 + cols]);
    }
    for p in 0..k {
        let bp = &b[p * m + j0..p * m + j0 + cols];
        for (r, row) in acc.iter_mut().enumerate().take(rows) {
            let av = a[(i0 + r) * rs + p * cs];
            for (x, &bv) in row.iter_mut().zip(bp) {
                *x = *x + av * bv;
            }
        }
    }
    for r in 0..rows {
        c[(i0 + r) * m + j0..(i0 + r) * m + j0 + cols].copy_from_slice(&acc[r][..cols]);
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    gemm_strided(a, k, 1, b, c, n, k, m);
}

/// `c[n×m] += a[k×n]ᵀ · b[k×m]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    gemm_strided(a, 1, n, b, c, n, k, m);
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    let bt = transpose2(b, m, k);
    gemm_nn(a, &bt, c, n, k, m);
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose2<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfolds an NHWC input into `[B·Ho·Wo, kh·kw·C]` patches; out-of-bounds taps are zero.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let c = g.in_channels;
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = row + (ky * g.kernel_w + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the NHWC input.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let c = g.in_channels;
    let patch = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = row + (ky * g.kernel_w + kx) * c;
                        for ch in 0..c {
                            dx[dst + ch] = dx[dst + ch] + cols[src + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[j] = x[src(j)]` where output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(x[0]);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(x[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
