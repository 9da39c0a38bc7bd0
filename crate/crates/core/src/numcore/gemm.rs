use super::counter::record_flops;
use super::real::Real;

/// Read-only strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

/// Mutable strided matrix view into a flat buffer.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        offset
    } else {
        offset + (rows - 1) * rs + (cols - 1) * cs
    }
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major `rows x cols` view of `data`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [T],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            let last = last_index(offset, rows, cols, row_stride, col_stride);
            assert!(
                last < data.len(),
                "matrix view out of bounds: last index {last}, buffer {}",
                data.len()
            );
        }
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    /// Sub-block starting at (`r0`, `c0`).
    pub fn block(self, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Self::strided(
            self.data,
            self.offset + r0 * self.row_stride + c0 * self.col_stride,
            rows,
            cols,
            self.row_stride,
            self.col_stride,
        )
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[self.offset + r * self.row_stride + c * self.col_stride]
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [T],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            let last = last_index(offset, rows, cols, row_stride, col_stride);
            assert!(
                last < data.len(),
                "matrix view out of bounds: last index {last}, buffer {}",
                data.len()
            );
        }
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    pub fn block(self, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let offset = self.offset + r0 * self.row_stride + c0 * self.col_stride;
        Self::strided(self.data, offset, rows, cols, self.row_stride, self.col_stride)
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
///
/// Records `2 * m * k * n` FLOPs with the thread-local counter.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension mismatch");
    assert!(c.rows == m && c.cols == n, "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    record_flops((2 * m * k * n) as u64);
    if k == 0 {
        // matrixmultiply handles k == 0 by scaling c, but keep it explicit.
        for r in 0..m {
            for col in 0..n {
                let idx = c.offset + r * c.row_stride + col * c.col_stride;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked at construction, `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}
