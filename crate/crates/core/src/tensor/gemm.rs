//! Strided matrix multiply over `Float`, backed by `matrixmultiply`.

use super::Float;

/// Row/column strides of a matrix view, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// View of a row-major `cols × rows` buffer as its transpose.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_stride: 1, col_stride: rows }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha · a · b + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(alpha: Float, a: &[Float], la: Layout, b: &[Float], lb: Layout, beta: Float, c: &mut [Float], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    assert!(la.cols == 0 || la.max_offset() < a.len());
    assert!(lb.cols == 0 || lb.max_offset() < b.len());
    assert!(lc.max_offset() < c.len());
    // SAFETY: every index touched is bounded by max_offset, checked above.
    unsafe {
        raw_gemm(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as raw_gemm;

#[cfg(feature = "f64")]
use matrixmultiply::dgemm as raw_gemm;
