//! Strided GEMM over `f64` slices, backed by `matrixmultiply`.
//!
//! The crate is used single-threaded, so results are a pure function of the
//! inputs and their layout.

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// View of the transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    /// The `rows × cols` block whose top-left element is `(row, col)`.
    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> Self {
        debug_assert!(row + rows <= self.rows && col + cols <= self.cols);
        Self {
            data: &self.data[row * self.rs + col * self.cs..],
            rows,
            cols,
            rs: self.rs,
            cs: self.cs,
        }
    }

    /// Transposed view of the same data.
    pub fn t(&self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a · b + beta * c`, where `c` is `a.rows × b.cols` with row
/// stride `c_rs` and unit column stride.
pub(crate) fn gemm(alpha: f64, a: MatRef, b: MatRef, beta: f64, c: &mut [f64], c_rs: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dims");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_rs >= n);
    assert!((m - 1) * c_rs + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for x in &mut c[i * c_rs..i * c_rs + n] {
                *x *= beta;
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// `y = x · w (+ bias)` for a single row, accumulating over `k` in order.
/// Used by the inference path so that every row is computed identically
/// regardless of how many rows are processed together.
pub(crate) fn row_matmul(x: &[f64], w: &[f64], n: usize, bias: Option<&[f64]>, y: &mut [f64]) {
    debug_assert_eq!(x.len() * n, w.len());
    match bias {
        Some(b) => y.copy_from_slice(b),
        None => y.fill(0.0),
    }
    for (k, &xk) in x.iter().enumerate() {
        let wr = &w[k * n..(k + 1) * n];
        for (yj, &wj) in y.iter_mut().zip(wr) {
            *yj += xk * wj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_views_agree_with_naive() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 4x2
        let mut c = vec![0.0; 6];
        gemm(1.0, MatRef::row_major(&a, 3, 4), MatRef::row_major(&b, 4, 2), 0.0, &mut c, 2);
        let want = naive(&a, &b, 3, 4, 2);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (bᵀ)ᵀ through the transposed view: bt is 2x4 row-major.
        let mut bt = vec![0.0; 8];
        for l in 0..4 {
            for j in 0..2 {
                bt[j * 4 + l] = b[l * 2 + j];
            }
        }
        let mut c2 = vec![0.0; 6];
        gemm(1.0, MatRef::row_major(&a, 3, 4), MatRef::transposed(&bt, 2, 4), 0.0, &mut c2, 2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_matmul_matches_naive() {
        let x = [1.0, -2.0, 0.5];
        let w: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let mut y = [0.0; 2];
        row_matmul(&x, &w, 2, Some(&[1.0, 1.0]), &mut y);
        let want = naive(&x, &w, 1, 3, 2);
        assert_eq!(y, [want[0] + 1.0, want[1] + 1.0]);
    }
}
