//! Thin safe wrappers over `matrixmultiply` for row-major f32 buffers.

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c, beta);
}

/// `c = a · bᵀ + beta · c` with `a: m×k`, `b: n×k`.
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    gemm(m, k, n, a, (k, 1), b, (1, k), c, beta);
}

/// `c = aᵀ · b + beta · c` with `a: k×m`, `b: k×n`.
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    gemm(m, k, n, a, (1, m), b, (n, 1), c, beta);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k, "lhs buffer too small");
    assert!(b.len() >= k * n, "rhs buffer too small");
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches given
    // dense row-major (or transposed) layouts with the strides passed here.
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
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree_with_naive() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2×3
        let b: Vec<f32> = (0..12).map(|v| (v as f32) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        matmul(2, 3, 4, &a, &b, &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // bᵀ stored as 4×3
        let bt: Vec<f32> = (0..4).flat_map(|j| (0..3).map(move |p| (p, j))).map(|(p, j)| b[p * 4 + j]).collect();
        let mut c2 = vec![0.0; 8];
        matmul_nt(2, 3, 4, &a, &bt, &mut c2, 0.0);
        assert_eq!(c, c2);
        // aᵀ stored as 3×2
        let at: Vec<f32> = (0..3).flat_map(|p| (0..2).map(move |i| (i, p))).map(|(i, p)| a[i * 3 + p]).collect();
        let mut c3 = vec![1.0; 8];
        matmul_tn(2, 3, 4, &at, &b, &mut c3, 1.0);
        for (x, y) in c3.iter().zip(&c) {
            assert_eq!(*x, y + 1.0);
        }
    }
}
