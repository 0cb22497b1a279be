//! Thin wrappers over `matrixmultiply` for row-major `f64` matrices.

/// `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape `m x k` and
/// `op(B)` of shape `k x n`, all row-major. `ta`/`tb` select the transpose
/// of the stored matrix (`A` stored `k x m` when `ta`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, 1.0, &a, false, &b, false, 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 1.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 4 + j];
                }
                assert_eq!(c[i * 4 + j], s);
            }
        }
        // a^T (3x2) times a (2x3)
        let mut g = vec![0.0; 9];
        gemm(3, 2, 3, 1.0, &a, true, &a, false, 0.0, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..2).map(|p| a[p * 3 + i] * a[p * 3 + j]).sum();
                assert_eq!(g[i * 3 + j], s);
            }
        }
        // a (2x3) times a^T (3x2)
        let mut h = vec![0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &a, true, 0.0, &mut h);
        assert_eq!(h[1], (0..3).map(|p| a[p] * a[3 + p]).sum::<f64>());
    }
}
