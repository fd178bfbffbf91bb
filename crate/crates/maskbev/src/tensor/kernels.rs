//! Raw numeric kernels shared by the tensor ops.
//!
//! The matmul kernel accumulates along contiguous output rows (ikj order)
//! so the inner loop vectorizes without reassociating any reduction; a
//! given output element is always the same left-to-right sum regardless of
//! how rows are distributed across threads.

use super::Scalar;
use crate::util::par;

/// Row count below which a matmul stays on the calling thread.
const PAR_MIN_ROWS: usize = 32;
/// Minimum per-op flop count before fanning out rows.
const PAR_MIN_WORK: usize = 1 << 20;

/// `c += a (m×k) · b (k×n)`, row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let work = m * k * n;
    if m >= PAR_MIN_ROWS && work >= PAR_MIN_WORK {
        par::for_each_row_chunk(c, n, |row0, chunk| {
            let rows = chunk.len() / n;
            for r in 0..rows {
                let i = row0 + r;
                let crow = &mut chunk[r * n..(r + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        crow[j] = crow[j] + aip * brow[j];
                    }
                }
            }
        });
    } else {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] = crow[j] + aip * brow[j];
                }
            }
        }
    }
}

/// `c = a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c = a (m×k) · b (n×k)^T`; plain dot products, used when `k` is small.
pub fn matmul_tb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            crow[j] = s;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_tb_matches_transposed() {
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).cos()).collect();
        let b: Vec<f64> = (0..n * k).map(|i| i as f64 * 0.1).collect();
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        assert_eq!(matmul_tb(&a, &b, m, k, n), matmul(&a, &bt, m, k, n));
    }
}
