//! Raw loops behind the tape primitives. Matrix products go through
//! `matrixmultiply`; everything else is plain indexing over row-major
//! buffers.

use crate::Real;

/// Strided matrix: (row stride, column stride).
#[derive(Clone, Copy)]
pub struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub const fn rm(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }
    /// Transposed view of a row-major matrix that has `cols` columns.
    pub const fn tr(cols: usize) -> Self {
        Layout { rs: 1, cs: cols as isize }
    }
}

fn span(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * l.rs as usize + (cols as isize - 1) as usize * l.cs as usize + 1
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    la: Layout,
    b: &[Real],
    lb: Layout,
    beta: Real,
    c: &mut [Real],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= span(m, k, la), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, lb), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, lc), "gemm: output buffer too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * lc.rs as usize + j * lc.cs as usize;
                c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), la.rs, la.cs, b.as_ptr(), lb.rs, lb.cs, beta,
            c.as_mut_ptr(), lc.rs, lc.cs,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), la.rs, la.cs, b.as_ptr(), lb.rs, lb.cs, beta,
            c.as_mut_ptr(), lc.rs, lc.cs,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.r * self.s
    }
    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent of a sliding window, `None` if the window does not fit.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn im2col(x: &[Real], g: &ConvGeom, col: &mut [Real]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for r in 0..g.r {
            for s in 0..g.s {
                let row = (c * g.r + r) * g.s + s;
                let out = &mut col[row * p..(row + 1) * p];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + r) as isize - g.pad as isize;
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + s) as isize - g.pad as isize;
                        out[oh * g.ow + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                            x[(c * g.h + ih as usize) * g.w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub fn col2im(col: &[Real], g: &ConvGeom, dx: &mut [Real]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for r in 0..g.r {
            for s in 0..g.s {
                let row = (c * g.r + r) * g.s + s;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + r) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + s) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dx[(c * g.h + ih as usize) * g.w + iw as usize] += src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open input window `[start, end)` for output index `i` of an adaptive
/// pool mapping `input` cells onto `output` cells.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}
