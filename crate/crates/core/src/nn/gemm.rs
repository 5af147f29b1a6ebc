//! Thin bounds-checked wrapper over `matrixmultiply::dgemm`.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy)]
pub(crate) struct Strides(pub isize, pub isize);

impl Strides {
    /// Row-major `rows × cols` matrix.
    pub(crate) fn row_major(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub(crate) fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.0 as usize + (cols - 1) * self.1 as usize
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(sa.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(sb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: every offset touched by dgemm was bounds-checked above, and
    // `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2×3
        let b = [7., 8., 9., 10., 11., 12.]; // 3×2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, Strides::row_major(3), &b, Strides::row_major(2), 0.0, &mut c);
        assert_eq!(c, [58., 64., 139., 154.]);

        // aᵀ·a (3×3) via a transposed view.
        let mut c = [0.0; 9];
        gemm(3, 2, 3, &a, Strides::transposed(3), &a, Strides::row_major(3), 0.0, &mut c);
        assert_eq!(c, [17., 22., 27., 22., 29., 36., 27., 36., 45.]);
    }
}
