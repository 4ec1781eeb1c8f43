//! Row-major matrix products on flat buffers.
//!
//! Work is split along the larger output dimension into fixed-size blocks
//! that rayon may run in parallel. Block boundaries never depend on the
//! thread count, so every output element is produced by the same sequence of
//! floating-point operations whatever the pool size.

use rayon::prelude::*;

const BLOCK: usize = 256;

/// A strided view of an `rows × cols` matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// `c = a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "inner dimensions differ");
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let out = SendPtr(c.as_mut_ptr());
    let out = &out;
    let run = |r0: usize, r1: usize, c0: usize, c1: usize| unsafe {
        // SAFETY: blocks are disjoint sub-rectangles of `c`; the strided
        // pointers stay inside the slices bounds-checked above.
        matrixmultiply::dgemm(
            r1 - r0,
            k,
            c1 - c0,
            1.0,
            a.data.as_ptr().offset(r0 as isize * a.row_stride),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().offset(c0 as isize * b.col_stride),
            b.row_stride,
            b.col_stride,
            beta,
            out.0.add(r0 * n + c0),
            n as isize,
            1,
        );
    };
    if m >= n {
        (0..m.div_ceil(BLOCK))
            .into_par_iter()
            .for_each(|blk| run(blk * BLOCK, ((blk + 1) * BLOCK).min(m), 0, n));
    } else {
        (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .for_each(|blk| run(0, m, blk * BLOCK, ((blk + 1) * BLOCK).min(n)));
    }
}
