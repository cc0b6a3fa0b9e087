//! Dense kernels shared by the tape and the integer inference path.

/// `c = a · b + beta · c` for row-major operands.
///
/// `a` is logically `m×k` (stored `k×m` when `trans_a`), `b` is logically
/// `k×n` (stored `n×k` when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches
    // through the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Integer `a · bᵀ` with `a: m×k`, `b: n×k`, accumulating in checked `i32`
/// arithmetic and returning `None` if any partial sum overflows.
pub(crate) fn gemm_i32_nt(m: usize, k: usize, n: usize, a: &[i32], b: &[i32]) -> Option<Vec<i32>> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &b[j * k..(j + 1) * k];
            let mut acc: i32 = 0;
            for (&x, &w) in row.iter().zip(col) {
                acc = acc.checked_add(x.checked_mul(w)?)?;
            }
            out[i * n + j] = acc;
        }
    }
    Some(out)
}

/// Geometry of a 2-d cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the patch matrix: one per output pixel per image.
    pub fn patch_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Columns of the patch matrix: one per kernel tap.
    pub fn patch_cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Unfold `x: [N, C, H, W]` into patches `[N·OH·OW, C·kH·kW]`; padding reads
/// as `T::default()`.
pub(crate) fn im2col<T: Copy + Default>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.patch_cols();
    let mut out = vec![T::default(); g.patch_rows() * cols];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * cols;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let src = ((n * g.in_ch + c) * g.height + iy as usize) * g.width
                                + ix as usize;
                            out[row + (c * g.kh + ky) * g.kw + kx] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.patch_cols();
    let mut dx = vec![0.0; g.batch * g.in_ch * g.height * g.width];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * ncols;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let dst = ((n * g.in_ch + c) * g.height + iy as usize) * g.width
                                + ix as usize;
                            dx[dst] += cols[row + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[N·OH·OW, F]` row layout to `[N, F, OH, OW]`.
pub(crate) fn rows_to_nchw<T: Copy + Default>(rows: &[T], n: usize, f: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows.len()];
    for b in 0..n {
        for p in 0..hw {
            for c in 0..f {
                out[(b * f + c) * hw + p] = rows[(b * hw + p) * f + c];
            }
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
pub(crate) fn nchw_to_rows(x: &[f64], n: usize, f: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for c in 0..f {
            for p in 0..hw {
                out[(b * hw + p) * f + c] = x[(b * f + c) * hw + p];
            }
        }
    }
    out
}
