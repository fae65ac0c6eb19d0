//! f64 matrix-multiply kernels used by the convolution paths.
//!
//! Two accumulate products are needed:
//!   * `gemm_acc`:  C += A * B   with A row-major (lda), B and C strided rows
//!   * `gemm_abt_acc`: C += A * B^T with A and B rows contiguous over K
//!
//! An AVX-512 broadcast/FMA kernel is used when the CPU supports it;
//! otherwise everything routes through `matrixmultiply`. Both backends
//! run a fixed operation order, so results are bitwise reproducible.

use std::sync::OnceLock;

static FORCE_REFERENCE: OnceLock<bool> = OnceLock::new();

fn use_avx512() -> bool {
    static AVX512: OnceLock<bool> = OnceLock::new();
    if *FORCE_REFERENCE.get_or_init(|| std::env::var("STREK_GEMM").as_deref() == Ok("reference")) {
        return false;
    }
    *AVX512.get_or_init(|| is_x86_feature_detected!("avx512f"))
}

/// C[m x n] += A[m x k] * B[k x n].
/// A is row-major with leading dimension `lda`; B rows start `ldb` apart,
/// C rows `ldc` apart; columns of B and C are contiguous.
pub fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    debug_assert!(a.len() >= (m - 1) * lda + k);
    debug_assert!(b.len() >= (k - 1) * ldb + n);
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if use_avx512() {
        unsafe { avx512::gemm_acc(m, k, n, a.as_ptr(), lda, b.as_ptr(), ldb, c.as_mut_ptr(), ldc) };
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            lda as isize,
            1,
            b.as_ptr(),
            ldb as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// C[m x n] += A[m x k] * B[n x k]^T, with the rows of both A and B
/// contiguous over K (leading dimensions `lda`, `ldb`).
pub fn gemm_abt_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    debug_assert!(a.len() >= (m - 1) * lda + k);
    debug_assert!(b.len() >= (n - 1) * ldb + k);
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if use_avx512() {
        unsafe { avx512::gemm_abt_acc(m, k, n, a.as_ptr(), lda, b.as_ptr(), ldb, c.as_mut_ptr(), ldc) };
        return;
    }
    unsafe {
        // B^T as a k x n matrix: row stride 1, column stride ldb.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            lda as isize,
            1,
            b.as_ptr(),
            1,
            ldb as isize,
            1.0,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

mod avx512 {
    //! Broadcast-FMA microkernels. Tiles: 8 rows x 16 columns (A*B) and
    //! 4 x 4 dot-product rows (A*B^T). Edge tiles fall back to scalar loops.

    #[target_feature(enable = "avx512f")]
    pub unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        lda: usize,
        b: *const f64,
        ldb: usize,
        c: *mut f64,
        ldc: usize,
    ) {
        use std::arch::x86_64::*;
        const MR: usize = 8;
        const NR: usize = 16; // two zmm registers wide
        let m_main = m - m % MR;
        let n_main = n - n % NR;
        for i0 in (0..m_main).step_by(MR) {
            for j0 in (0..n_main).step_by(NR) {
                let mut acc0 = [_mm512_setzero_pd(); MR];
                let mut acc1 = [_mm512_setzero_pd(); MR];
                for kk in 0..k {
                    let brow = b.add(kk * ldb + j0);
                    let b0 = _mm512_loadu_pd(brow);
                    let b1 = _mm512_loadu_pd(brow.add(8));
                    for (i, (a0, a1)) in acc0.iter_mut().zip(acc1.iter_mut()).enumerate() {
                        let av = _mm512_set1_pd(*a.add((i0 + i) * lda + kk));
                        *a0 = _mm512_fmadd_pd(av, b0, *a0);
                        *a1 = _mm512_fmadd_pd(av, b1, *a1);
                    }
                }
                for i in 0..MR {
                    let crow = c.add((i0 + i) * ldc + j0);
                    _mm512_storeu_pd(crow, _mm512_add_pd(_mm512_loadu_pd(crow), acc0[i]));
                    _mm512_storeu_pd(crow.add(8), _mm512_add_pd(_mm512_loadu_pd(crow.add(8)), acc1[i]));
                }
            }
        }
        // Right edge (n tail) for the main row block.
        if n_main < n {
            scalar_block(m_main, k, n_main, n, a, lda, b, ldb, c, ldc, 0);
        }
        // Bottom edge (m tail), full width.
        if m_main < m {
            scalar_block(m, k, 0, n, a, lda, b, ldb, c, ldc, m_main);
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn scalar_block(
        m_end: usize,
        k: usize,
        j_start: usize,
        j_end: usize,
        a: *const f64,
        lda: usize,
        b: *const f64,
        ldb: usize,
        c: *mut f64,
        ldc: usize,
        i_start: usize,
    ) {
        for i in i_start..m_end {
            for kk in 0..k {
                let av = *a.add(i * lda + kk);
                for j in j_start..j_end {
                    *c.add(i * ldc + j) += av * *b.add(kk * ldb + j);
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn gemm_abt_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        lda: usize,
        b: *const f64,
        ldb: usize,
        c: *mut f64,
        ldc: usize,
    ) {
        use std::arch::x86_64::*;
        const MR: usize = 4;
        const NR: usize = 4;
        let k_main = k - k % 8;
        for i0 in (0..m).step_by(MR) {
            let mi = (m - i0).min(MR);
            for j0 in (0..n).step_by(NR) {
                let nj = (n - j0).min(NR);
                let mut acc = [[_mm512_setzero_pd(); NR]; MR];
                for kk in (0..k_main).step_by(8) {
                    let mut avs = [_mm512_setzero_pd(); MR];
                    let mut bvs = [_mm512_setzero_pd(); NR];
                    for (i, av) in avs.iter_mut().enumerate().take(mi) {
                        *av = _mm512_loadu_pd(a.add((i0 + i) * lda + kk));
                    }
                    for (j, bv) in bvs.iter_mut().enumerate().take(nj) {
                        *bv = _mm512_loadu_pd(b.add((j0 + j) * ldb + kk));
                    }
                    for i in 0..mi {
                        for j in 0..nj {
                            acc[i][j] = _mm512_fmadd_pd(avs[i], bvs[j], acc[i][j]);
                        }
                    }
                }
                for i in 0..mi {
                    for j in 0..nj {
                        let mut dot = _mm512_reduce_add_pd(acc[i][j]);
                        for kk in k_main..k {
                            dot += *a.add((i0 + i) * lda + kk) * *b.add((j0 + j) * ldb + kk);
                        }
                        *c.add((i0 + i) * ldc + j0 + j) += dot;
                    }
                }
            }
        }
    }
}
