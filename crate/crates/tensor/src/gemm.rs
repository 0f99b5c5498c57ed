//! Strided single-precision matrix multiply on top of `matrixmultiply`.

use crate::par;

/// Output columns handled per task when running on several threads. Each
/// output element is reduced over `k` in the same order whichever column block
/// it lands in, so blocked and unblocked products are bit-identical.
const COL_BLOCK: usize = 512;

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of a row-major `rows × cols` buffer as its `cols × rows` transpose.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

impl SendPtr {
    fn get(&self) -> *mut f32 {
        self.0
    }
}

/// `c = a·b + beta·c`, where `a` is `m×k`, `b` is `k×n` and `c` is row-major `m×n`.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], beta: f32) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "output buffer too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let out = SendPtr(c.as_mut_ptr());
    let parallel = n > COL_BLOCK && par::num_threads() > 1;
    let block = if parallel { COL_BLOCK } else { n };
    let blocks = n.div_ceil(block);
    let run = |bi: usize| {
        let j0 = bi * block;
        let nb = block.min(n - j0);
        // SAFETY: the views were bounds-checked above; blocks write disjoint
        // column ranges of `c`, which outlives this call.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                nb,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr().add(j0 * b.col_stride),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                out.get().add(j0),
                n as isize,
                1,
            );
        }
    };
    if parallel {
        par::map_range(blocks, run);
    } else {
        run(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (7, 13, 1100);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 11 % 23) as f32 - 11.0) / 11.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut c, 0.0);
        let want = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn transposed_views() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32).collect();
        // store a^T (k×m) and read it back as a
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut c1, 0.0);
        gemm(m, k, n, MatRef::transposed(&at, m), MatRef::row_major(&b, n), &mut c2, 0.0);
        assert_eq!(c1, c2);
    }

    #[test]
    fn column_blocking_is_bit_stable() {
        let (m, k, n) = (9, 301, 2 * COL_BLOCK + 77);
        let a: Vec<f32> = (0..m * k).map(|i| ((i as f32) * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i as f32) * 0.11).cos()).collect();
        let mut blocked = vec![0.0; m * n];
        for j0 in (0..n).step_by(COL_BLOCK) {
            let nb = COL_BLOCK.min(n - j0);
            unsafe {
                matrixmultiply::sgemm(
                    m, k, nb, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr().add(j0), n as isize, 1, 0.0,
                    blocked.as_mut_ptr().add(j0), n as isize, 1,
                );
            }
        }
        let mut whole = vec![0.0; m * n];
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                whole.as_mut_ptr(), n as isize, 1,
            );
        }
        assert_eq!(blocked, whole);
    }
}
