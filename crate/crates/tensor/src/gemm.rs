/// `C = A·B + beta·C` with explicit (row, column) strides.
///
/// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`. Bounds are checked against the
/// largest index each stride pair can reach.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    c_strides: (usize, usize),
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len(), "A out of bounds");
        assert!(last(k, n, b_strides) < b.len(), "B out of bounds");
    }
    assert!(last(m, n, c_strides) < c.len(), "C out of bounds");
    // SAFETY: every index reachable through the strides is in bounds (checked
    // above) and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}
