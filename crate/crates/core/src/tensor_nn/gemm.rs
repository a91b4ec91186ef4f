//! Small dense matrix multiply used by the convolution kernels.
//!
//! Every output element accumulates its k terms in increasing k order
//! starting from its initial value, whatever the blocking, so results do not
//! depend on how callers split the work. The AVX2 build of the kernel runs
//! the same scalar operations (no fused multiply-add), so it is bit-identical
//! to the portable one.

use super::Real;

const MR: usize = 4;

/// Strided read-only matrix view: element (i, j) is `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<T: Copy> MatRef<'_, T> {
    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c[i * ldc + j] += sum_k a(i, k) * b[k * ldb + j]` for i < m, j < n.
/// `b` must be row-major with unit column stride.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { gemm_avx2(m, n, k, a, b, ldb, c, ldc) };
            return;
        }
    }
    gemm_portable(m, n, k, a, b, ldb, c, ldc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
fn gemm_avx2<T: Real>(m: usize, n: usize, k: usize, a: MatRef<'_, T>, b: &[T], ldb: usize, c: &mut [T], ldc: usize) {
    gemm_portable(m, n, k, a, b, ldb, c, ldc);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_portable<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    let mut j = 0;
    j = panel::<T, 16>(j, m, n, k, a, b, ldb, c, ldc);
    j = panel::<T, 8>(j, m, n, k, a, b, ldb, c, ldc);
    if j < n {
        for i in 0..m {
            edge(i, j, n - j, k, a, b, ldb, c, ldc);
        }
    }
}

/// Columns `j..` in blocks of NR; returns the first column not covered.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn panel<T: Real, const NR: usize>(
    mut j: usize,
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) -> usize {
    while j + NR <= n {
        let mut i = 0;
        while i + MR <= m {
            micro_kernel::<T, NR>(i, j, k, a, b, ldb, c, ldc);
            i += MR;
        }
        for i in i..m {
            edge(i, j, NR, k, a, b, ldb, c, ldc);
        }
        j += NR;
    }
    j
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_kernel<T: Real, const NR: usize>(
    i: usize,
    j: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * ldc + j..][..NR]);
    }
    let b = &b[j..];
    for kk in 0..k {
        let brow: &[T; NR] = b[kk * ldb..][..NR].try_into().unwrap();
        let av = [a.at(i, kk), a.at(i + 1, kk), a.at(i + 2, kk), a.at(i + 3, kk)];
        for r in 0..MR {
            for q in 0..NR {
                acc[r][q] += av[r] * brow[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * ldc + j..][..NR].copy_from_slice(row);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn edge<T: Real>(
    i: usize,
    j: usize,
    width: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    let out = &mut c[i * ldc + j..][..width];
    for kk in 0..k {
        let av = a.at(i, kk);
        for (o, &bv) in out.iter_mut().zip(&b[kk * ldb + j..][..width]) {
            *o += av * bv;
        }
    }
}
