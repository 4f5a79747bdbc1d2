use super::{macs, Scalar};

/// Strided view of a row-major operand: `(slice, row stride, column stride)`.
pub(crate) type Operand<'a, T> = (&'a [T], usize, usize);

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + (accumulate ? c : 0)`.
///
/// Every call is reported to the MAC counter as `m * k * n`.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    c: (&mut [T], usize, usize),
    accumulate: bool,
) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    let (c, rsc, csc) = c;
    assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    macs::record((m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the spans checked above bound every index matrixmultiply touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}
