//! Matrix products and window gather/scatter.

use std::sync::Arc;

use super::kernels::{matmul, matmul_acc, matmul_tb};
use super::ops::transpose_into;
use super::tape::record;
use super::{shape_mismatch, Scalar, Tensor};
use crate::util::par;

impl<T: Scalar> Tensor<T> {
    /// 2-D matrix product `self (m×k) · rhs (k×n)`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        if self.shape().len() != 2 || rhs.shape().len() != 2 || self.shape()[1] != rhs.shape()[0] {
            shape_mismatch("matmul", self.shape(), rhs.shape());
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let out = matmul(self.data(), rhs.data(), m, k, n);
        let a = self.data_arc();
        let b = rhs.data_arc();
        super::tape::record_selective("matmul", &[self, rhs], out, vec![m, n], |mask| {
            let needs = (mask[0], mask[1]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    // dA = G · B^T
                    let mut bt = vec![T::zero(); n * k];
                    transpose_into(&b, &mut bt, k, n);
                    grads.push(matmul(g, &bt, m, n, k));
                }
                if needs.1 {
                    // dB = A^T · G
                    let mut at = vec![T::zero(); k * m];
                    transpose_into(&a, &mut at, m, k);
                    grads.push(matmul(&at, g, k, m, n));
                }
                grads
            })
        })
    }

    /// Batched product `self [B,m,k] · rhs [B,k,n]`, independent per batch.
    pub fn batched_matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (bs, m, k) = expect_rank3("batched_matmul", self);
        let (bs2, k2, n) = expect_rank3("batched_matmul", rhs);
        if bs != bs2 || k != k2 {
            shape_mismatch("batched_matmul", self.shape(), rhs.shape());
        }
        let a = self.data_arc();
        let b = rhs.data_arc();
        let mut out = vec![T::zero(); bs * m * n];
        par::for_each_row_chunk(&mut out, m * n, |b0, chunk| {
            for (bi, slot) in chunk.chunks_mut(m * n).enumerate() {
                let idx = b0 + bi;
                matmul_acc(
                    &a[idx * m * k..(idx + 1) * m * k],
                    &b[idx * k * n..(idx + 1) * k * n],
                    slot,
                    m,
                    k,
                    n,
                );
            }
        });
        super::tape::record_selective("batched_matmul", &[self, rhs], out, vec![bs, m, n], |mask| {
            let needs = (mask[0], mask[1]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    let mut da = vec![T::zero(); bs * m * k];
                    par::for_each_row_chunk(&mut da, m * k, |b0, chunk| {
                        for (bi, slot) in chunk.chunks_mut(m * k).enumerate() {
                            let idx = b0 + bi;
                            // dA = G · B^T per batch
                            let gs = &g[idx * m * n..(idx + 1) * m * n];
                            let bsl = &b[idx * k * n..(idx + 1) * k * n];
                            let mut bt = vec![T::zero(); n * k];
                            transpose_into(bsl, &mut bt, k, n);
                            matmul_acc(gs, &bt, slot, m, n, k);
                        }
                    });
                    grads.push(da);
                }
                if needs.1 {
                    let mut db = vec![T::zero(); bs * k * n];
                    par::for_each_row_chunk(&mut db, k * n, |b0, chunk| {
                        for (bi, slot) in chunk.chunks_mut(k * n).enumerate() {
                            let idx = b0 + bi;
                            let gs = &g[idx * m * n..(idx + 1) * m * n];
                            let asl = &a[idx * m * k..(idx + 1) * m * k];
                            let mut at = vec![T::zero(); k * m];
                            transpose_into(asl, &mut at, m, k);
                            matmul_acc(&at, gs, slot, k, m, n);
                        }
                    });
                    grads.push(db);
                }
                grads
            })
        })
    }

    /// Batched product against a transposed right operand:
    /// `self [B,m,k] · rhs [B,n,k]^T -> [B,m,n]`.
    pub fn batched_matmul_tb(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (bs, m, k) = expect_rank3("batched_matmul_tb", self);
        let (bs2, n, k2) = expect_rank3("batched_matmul_tb", rhs);
        if bs != bs2 || k != k2 {
            shape_mismatch("batched_matmul_tb", self.shape(), rhs.shape());
        }
        let a = self.data_arc();
        let b = rhs.data_arc();
        let mut out = vec![T::zero(); bs * m * n];
        par::for_each_row_chunk(&mut out, m * n, |b0, chunk| {
            for (bi, slot) in chunk.chunks_mut(m * n).enumerate() {
                let idx = b0 + bi;
                let c = matmul_tb(
                    &a[idx * m * k..(idx + 1) * m * k],
                    &b[idx * n * k..(idx + 1) * n * k],
                    m,
                    k,
                    n,
                );
                slot.copy_from_slice(&c);
            }
        });
        super::tape::record_selective(
            "batched_matmul_tb",
            &[self, rhs],
            out,
            vec![bs, m, n],
            |mask| {
                let needs = (mask[0], mask[1]);
                Box::new(move |g| {
                    let mut grads = Vec::new();
                    if needs.0 {
                        // dA = G · B (G: [m,n], B: [n,k])
                        let mut da = vec![T::zero(); bs * m * k];
                        par::for_each_row_chunk(&mut da, m * k, |b0, chunk| {
                            for (bi, slot) in chunk.chunks_mut(m * k).enumerate() {
                                let idx = b0 + bi;
                                matmul_acc(
                                    &g[idx * m * n..(idx + 1) * m * n],
                                    &b[idx * n * k..(idx + 1) * n * k],
                                    slot,
                                    m,
                                    n,
                                    k,
                                );
                            }
                        });
                        grads.push(da);
                    }
                    if needs.1 {
                        // dB = G^T · A (G^T: [n,m], A: [m,k])
                        let mut db = vec![T::zero(); bs * n * k];
                        par::for_each_row_chunk(&mut db, n * k, |b0, chunk| {
                            for (bi, slot) in chunk.chunks_mut(n * k).enumerate() {
                                let idx = b0 + bi;
                                let gs = &g[idx * m * n..(idx + 1) * m * n];
                                let mut gt = vec![T::zero(); n * m];
                                transpose_into(gs, &mut gt, m, n);
                                matmul_acc(
                                    &gt,
                                    &a[idx * m * k..(idx + 1) * m * k],
                                    slot,
                                    n,
                                    m,
                                    k,
                                );
                            }
                        });
                        grads.push(db);
                    }
                    grads
                })
            },
        )
    }
}

fn expect_rank3<T: Scalar>(op: &str, t: &Tensor<T>) -> (usize, usize, usize) {
    assert_eq!(
        t.shape().len(),
        3,
        "{op}: expected rank 3, got shape {:?}",
        t.shape()
    );
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// Cell-index map from a spatial grid into windows.
///
/// `cells[w * p2 + p]` is the flat `H·W` cell behind window `w`, slot `p`,
/// or `-1` for a padded slot. Every valid cell appears exactly once.
#[derive(Clone)]
pub struct WindowMap {
    pub num_windows: usize,
    pub window_len: usize,
    pub grid_cells: usize,
    pub cells: Arc<Vec<i64>>,
}

impl WindowMap {
    pub fn new(num_windows: usize, window_len: usize, grid_cells: usize, cells: Vec<i64>) -> Self {
        assert_eq!(cells.len(), num_windows * window_len);
        WindowMap {
            num_windows,
            window_len,
            grid_cells,
            cells: Arc::new(cells),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Gather a `[D,H,W]` feature map into `[num_windows, window_len, D]`;
    /// padded slots read as zero.
    pub fn window_gather(&self, map: &WindowMap) -> Tensor<T> {
        assert_eq!(
            self.shape().len(),
            3,
            "window_gather: expected [D,H,W], got {:?}",
            self.shape()
        );
        let d = self.shape()[0];
        let hw = self.shape()[1] * self.shape()[2];
        assert_eq!(
            hw, map.grid_cells,
            "window_gather: map covers {} cells, input has {}",
            map.grid_cells, hw
        );
        let (nw, p2) = (map.num_windows, map.window_len);
        let mut out = vec![T::zero(); nw * p2 * d];
        for (slot, &cell) in map.cells.iter().enumerate() {
            if cell >= 0 {
                let cell = cell as usize;
                let base = slot * d;
                for ch in 0..d {
                    out[base + ch] = self.data()[ch * hw + cell];
                }
            }
        }
        let cells = Arc::clone(&map.cells);
        record("window_gather", &[self], out, vec![nw, p2, d], || {
            Box::new(move |g| {
                let mut dx = vec![T::zero(); d * hw];
                for (slot, &cell) in cells.iter().enumerate() {
                    if cell >= 0 {
                        let cell = cell as usize;
                        let base = slot * d;
                        for ch in 0..d {
                            dx[ch * hw + cell] = dx[ch * hw + cell] + g[base + ch];
                        }
                    }
                }
                vec![dx]
            })
        })
    }

    /// Inverse of [`Tensor::window_gather`]: write window slots back to the
    /// grid, dropping padded slots.
    pub fn window_scatter(&self, map: &WindowMap, h: usize, w: usize) -> Tensor<T> {
        let (nw, p2, d) = expect_rank3("window_scatter", self);
        assert_eq!(
            (nw, p2),
            (map.num_windows, map.window_len),
            "window_scatter: map shape mismatch"
        );
        assert_eq!(h * w, map.grid_cells, "window_scatter: grid size mismatch");
        let hw = h * w;
        let mut out = vec![T::zero(); d * hw];
        for (slot, &cell) in map.cells.iter().enumerate() {
            if cell >= 0 {
                let cell = cell as usize;
                let base = slot * d;
                for ch in 0..d {
                    out[ch * hw + cell] = self.data()[base + ch];
                }
            }
        }
        let cells = Arc::clone(&map.cells);
        record("window_scatter", &[self], out, vec![d, h, w], || {
            Box::new(move |g| {
                let mut dx = vec![T::zero(); nw * p2 * d];
                for (slot, &cell) in cells.iter().enumerate() {
                    if cell >= 0 {
                        let cell = cell as usize;
                        let base = slot * d;
                        for ch in 0..d {
                            dx[base + ch] = g[ch * hw + cell];
                        }
                    }
                }
                vec![dx]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn matmul_known_product() {
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_backward_rules() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0f64, 2.0], &[1, 2]));
        let b = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0], &[2, 1]));
        let grads = a.matmul(&b).sum().backward();
        assert_eq!(grads.get(&a), vec![3.0, 4.0]);
        assert_eq!(grads.get(&b), vec![1.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "matmul: shape mismatch")]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn batched_tb_equals_loop_of_transposes() {
        let a = Tensor::from_vec((0..12).map(|i| i as f64 * 0.3).collect(), &[2, 2, 3]);
        let b = Tensor::from_vec((0..24).map(|i| (i as f64).sin()).collect(), &[2, 4, 3]);
        let c = a.batched_matmul_tb(&b);
        for batch in 0..2 {
            for i in 0..2 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for p in 0..3 {
                        s += a.data()[batch * 6 + i * 3 + p] * b.data()[batch * 12 + j * 3 + p];
                    }
                    assert!((c.data()[batch * 8 + i * 4 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_gather_scatter_roundtrip() {
        // 2x (2x2) grid split into two 1x2 windows plus one padded slot each.
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], &[2, 2, 2]);
        let map = WindowMap::new(2, 3, 4, vec![0, 1, -1, 2, 3, -1]);
        let g = x.window_gather(&map);
        assert_eq!(g.shape(), &[2, 3, 2]);
        assert_eq!(
            g.data(),
            &[1.0, 10.0, 2.0, 20.0, 0.0, 0.0, 3.0, 30.0, 4.0, 40.0, 0.0, 0.0]
        );
        let back = g.window_scatter(&map, 2, 2);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn window_gather_backward_is_scatter() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 2, 2]));
        let map = WindowMap::new(1, 4, 4, vec![3, 2, 1, 0]);
        let grads = x.window_gather(&map).mul_scalar(2.0).sum().backward();
        assert_eq!(grads.get(&x), vec![2.0; 4]);
    }
}
