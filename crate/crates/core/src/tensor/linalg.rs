use super::Scalar;

/// Row-major `c[m×n] = op(a)·op(b)` (or `+=` when `accumulate`).
///
/// `a` is stored as `m×k`, or `k×m` when `a_t`; `b` as `k×n`, or `n×k` when
/// `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let beta = if accumulate { T::one() } else { T::zero() };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above guarantee every strided access of
    // an m×k, k×n and m×n operand stays inside its slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a·b` on strided views: `a` is `m×k` with strides `(rsa, csa)`, `b`
/// is `k×n` with strides `(rsb, csb)`, `c` is row-major `m×n`.
///
/// # Safety
/// Every addressed element of `a` and `b` must lie inside the slices.
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn gemm_acc_strided<T: Scalar>(
    (m, n, k): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
) {
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
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
        T::one(),
        c.as_mut_ptr(),
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                    let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn transposition_flags_match_naive_product() {
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        for a_t in [false, true] {
            for b_t in [false, true] {
                let mut c = vec![1.0; m * n];
                gemm(m, n, k, &a, a_t, &b, b_t, &mut c, false);
                let want = naive(m, n, k, &a, a_t, &b, b_t);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn accumulate_adds_to_existing_output() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let mut c = [10.0f64];
        gemm(1, 1, 2, &a, false, &b, false, &mut c, true);
        assert_eq!(c[0], 21.0);
    }
}
