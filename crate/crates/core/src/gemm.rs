//! Safe shim over `matrixmultiply::dgemm`.
//!
//! All matrix products in the crate funnel through here so the unsafe stride
//! arithmetic lives in exactly one place. Strides are in elements and must be
//! positive; bounds are checked against the slice lengths before the call.

/// c = alpha * a * b + beta * c, where a is m×k, b is k×n, c is m×n, each
/// with explicit (row, col) strides. Panics on impossible extents — callers
/// own the stride math and a violation is a bug, not an input error.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    assert!(m > 0 && k > 0 && n > 0, "dgemm: empty dimensions {m}x{k}x{n}");
    let need = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= need(m, k, rsa, csa), "dgemm: a too short");
    assert!(b.len() >= need(k, n, rsb, csb), "dgemm: b too short");
    assert!(c.len() >= need(m, n, rsc, csc), "dgemm: c too short");
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
        );
    }
}
