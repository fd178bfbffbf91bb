//! Data-parallel iteration with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run in order on the calling thread. Both paths produce
//! identical results: outputs are collected in input order and no floating
//! point reduction ever crosses a chunk boundary.

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Always-sequential twin of [`map_indexed`]; the criterion benches compare
/// the two on the same workloads.
pub fn map_indexed_seq<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Run `f` over disjoint row chunks of `buf` (`row_len` elements per row).
/// `f` receives the first row index of its chunk and the chunk itself.
#[cfg(feature = "parallel")]
pub fn for_each_row_chunk<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    buf: &mut [T],
    row_len: usize,
    f: F,
) {
    use rayon::prelude::*;
    let rows = buf.len() / row_len;
    let threads = rayon::current_num_threads().max(1);
    let rows_per_chunk = rows.div_ceil(threads).max(1);
    buf.par_chunks_mut(rows_per_chunk * row_len)
        .enumerate()
        .for_each(|(ci, chunk)| f(ci * rows_per_chunk, chunk));
}

/// Run `f` over disjoint row chunks of `buf` (`row_len` elements per row).
#[cfg(not(feature = "parallel"))]
pub fn for_each_row_chunk<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    buf: &mut [T],
    row_len: usize,
    f: F,
) {
    f(0, buf);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn row_chunks_cover_everything_once() {
        let mut buf = vec![0u32; 7 * 5];
        for_each_row_chunk(&mut buf, 5, |row0, chunk| {
            for (r, row) in chunk.chunks_mut(5).enumerate() {
                for v in row.iter_mut() {
                    *v += (row0 + r) as u32 + 1;
                }
            }
        });
        for (i, &v) in buf.iter().enumerate() {
            assert_eq!(v, (i / 5) as u32 + 1);
        }
    }
}
