use super::Float;

/// `c = alpha * a·b + beta * c` for row/column-strided operands.
///
/// `a` is m×k, `b` is k×n, `c` is m×n. Strides are in elements, which lets
/// callers pass transposed views by swapping them.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Float,
    a: &[Float],
    a_strides: (isize, isize),
    b: &[Float],
    b_strides: (isize, isize),
    beta: Float,
    c: &mut [Float],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(extent(m, k, a_strides) <= a.len());
    debug_assert!(extent(k, n, b_strides) <= b.len());
    debug_assert!(extent(m, n, c_strides) <= c.len());
    // SAFETY: the extents above are guaranteed by every caller in this module
    // tree; matrixmultiply reads and writes only within them.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

fn extent(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}
