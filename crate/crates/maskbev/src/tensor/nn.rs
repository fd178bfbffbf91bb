//! Normalization, softmax and channel-broadcast ops.

use std::sync::Arc;

use super::tape::{record, record_selective};
use super::{axis_split, shape_mismatch, t, Scalar, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Softmax along `axis`, computed with max subtraction. Masked logits
    /// are expected to carry a large negative finite value, never `-inf`.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for inn in 0..inner {
                let at = |i: usize| (o * len + i) * inner + inn;
                let mut max = x[at(0)];
                for i in 1..len {
                    max = max.max(x[at(i)]);
                }
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum = sum + e;
                }
                let inv = sum.recip();
                for i in 0..len {
                    out[at(i)] = out[at(i)] * inv;
                }
            }
        }
        let saved = Arc::new(out.clone());
        let shape = self.shape().to_vec();
        record("softmax", &[self], out, shape, || {
            Box::new(move |g| {
                let y = &saved;
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + inn;
                        let mut dot = T::zero();
                        for i in 0..len {
                            dot = dot + g[at(i)] * y[at(i)];
                        }
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![dx]
            })
        })
    }

    /// Layer normalization along `axis` with elementwise affine parameters
    /// `gamma` and `beta` of length `shape[axis]`.
    pub fn layernorm(&self, axis: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if gamma.numel() != len || beta.numel() != len {
            shape_mismatch("layernorm", self.shape(), gamma.shape());
        }
        let eps = t::<T>(eps);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let inv_len = T::from_usize(len).unwrap().recip();

        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for inn in 0..inner {
                let at = |i: usize| (o * len + i) * inner + inn;
                let mut mean = T::zero();
                for i in 0..len {
                    mean = mean + x[at(i)];
                }
                mean = mean * inv_len;
                let mut var = T::zero();
                for i in 0..len {
                    let d = x[at(i)] - mean;
                    var = var + d * d;
                }
                var = var * inv_len;
                let inv = (var + eps).sqrt().recip();
                inv_std[o * inner + inn] = inv;
                for i in 0..len {
                    let xh = (x[at(i)] - mean) * inv;
                    xhat[at(i)] = xh;
                    out[at(i)] = xh * gm[i] + bt[i];
                }
            }
        }

        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let gm_saved = gamma.data_arc();
        let shape = self.shape().to_vec();
        record_selective("layernorm", &[self, gamma, beta], out, shape, |mask| {
            let needs = (mask[0], mask[1], mask[2]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for inn in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + inn;
                            let inv = inv_std[o * inner + inn];
                            let mut mean_gg = T::zero();
                            let mut mean_ggx = T::zero();
                            for i in 0..len {
                                let gg = g[at(i)] * gm_saved[i];
                                mean_gg = mean_gg + gg;
                                mean_ggx = mean_ggx + gg * xhat[at(i)];
                            }
                            mean_gg = mean_gg * inv_len;
                            mean_ggx = mean_ggx * inv_len;
                            for i in 0..len {
                                let gg = g[at(i)] * gm_saved[i];
                                dx[at(i)] = inv * (gg - mean_gg - xhat[at(i)] * mean_ggx);
                            }
                        }
                    }
                    grads.push(dx);
                }
                if needs.1 {
                    let mut dgamma = vec![T::zero(); len];
                    for o in 0..outer {
                        for inn in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + inn;
                            for i in 0..len {
                                dgamma[i] = dgamma[i] + g[at(i)] * xhat[at(i)];
                            }
                        }
                    }
                    grads.push(dgamma);
                }
                if needs.2 {
                    let mut dbeta = vec![T::zero(); len];
                    for o in 0..outer {
                        for inn in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + inn;
                            for i in 0..len {
                                dbeta[i] = dbeta[i] + g[at(i)];
                            }
                        }
                    }
                    grads.push(dbeta);
                }
                grads
            })
        })
    }

    /// Add a per-key additive mask to batched attention logits:
    /// `self [B,m,n] + mask [B,n]` broadcast over the query rows.
    ///
    /// The mask is a constant; it must not be tape-attached.
    pub fn add_keymask(&self, mask: &Tensor<T>) -> Tensor<T> {
        assert!(
            mask.node().is_none(),
            "add_keymask: mask must be a constant"
        );
        if self.shape().len() != 3
            || mask.shape().len() != 2
            || self.shape()[0] != mask.shape()[0]
            || self.shape()[2] != mask.shape()[1]
        {
            shape_mismatch("add_keymask", self.shape(), mask.shape());
        }
        let (bs, m, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let mk = mask.data();
        let mut out = self.to_vec();
        for b in 0..bs {
            for i in 0..m {
                let base = (b * m + i) * n;
                let mrow = &mk[b * n..(b + 1) * n];
                for j in 0..n {
                    out[base + j] = out[base + j] + mrow[j];
                }
            }
        }
        record("add_keymask", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| vec![g.to_vec()])
        })
    }

    /// Per-channel scale of a `[C,H,W]` map by a length-`C` vector.
    pub fn mul_channel(&self, w: &Tensor<T>) -> Tensor<T> {
        if self.shape().len() != 3 || w.numel() != self.shape()[0] {
            shape_mismatch("mul_channel", self.shape(), w.shape());
        }
        let c = self.shape()[0];
        let hw = self.shape()[1] * self.shape()[2];
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let scale = w.data()[ch];
            let src = &self.data()[ch * hw..(ch + 1) * hw];
            let dst = &mut out[ch * hw..(ch + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
        }
        let x = self.data_arc();
        let wv = w.data_arc();
        record_selective("mul_channel", &[self, w], out, self.shape().to_vec(), |mask| {
            let needs = (mask[0], mask[1]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    let mut dx = vec![T::zero(); c * hw];
                    for ch in 0..c {
                        let scale = wv[ch];
                        for i in 0..hw {
                            dx[ch * hw + i] = g[ch * hw + i] * scale;
                        }
                    }
                    grads.push(dx);
                }
                if needs.1 {
                    let mut dw = vec![T::zero(); c];
                    for ch in 0..c {
                        let mut s = T::zero();
                        for i in 0..hw {
                            s = s + g[ch * hw + i] * x[ch * hw + i];
                        }
                        dw[ch] = s;
                    }
                    grads.push(dw);
                }
                grads
            })
        })
    }

    /// Broadcast a length-`C` vector to a constant `[C,H,W]` map.
    pub fn broadcast_channel(&self, h: usize, w: usize) -> Tensor<T> {
        assert_eq!(
            self.shape().len(),
            1,
            "broadcast_channel: expected a vector, got shape {:?}",
            self.shape()
        );
        let c = self.numel();
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let v = self.data()[ch];
            for slot in &mut out[ch * hw..(ch + 1) * hw] {
                *slot = v;
            }
        }
        record("broadcast_channel", &[self], out, vec![c, h, w], || {
            Box::new(move |g| {
                let mut dv = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..hw {
                        s = s + g[ch * hw + i];
                    }
                    dv[ch] = s;
                }
                vec![dv]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::from_vec(vec![1.0f64, 1.0, 1.0], &[3]);
        let y = x.softmax(0);
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![0.3f64, -2.0, 5.0, 1.0, 1.0, 1.0], &[2, 3]);
        let y = x.softmax(1);
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_vec(vec![0.5f64, -1.0, 2.0, 0.0], &[4]);
        let y0 = x.softmax(0);
        let y1 = x.add_scalar(7.25).softmax(0);
        for (a, b) in y0.data().iter().zip(y1.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.2f64, -0.4, 1.3], &[3]));
        let grads = x.softmax(0).sum().backward();
        for g in grads.get(&x) {
            assert!(g.abs() < 1e-12, "softmax sum grad should vanish, got {g}");
        }
    }

    #[test]
    fn layernorm_normalizes_axis() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]);
        let gamma = Tensor::from_vec(vec![1.0, 1.0], &[2]);
        let beta = Tensor::from_vec(vec![0.0, 0.0], &[2]);
        let y = x.layernorm(1, &gamma, &beta, 1e-12);
        for r in 0..2 {
            let row = &y.data()[r * 2..(r + 1) * 2];
            assert!((row[0] + row[1]).abs() < 1e-9);
            assert!((row[0] - (-1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn mul_channel_scales_per_channel() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let w = Tensor::from_vec(vec![10.0, 100.0], &[2]);
        let y = x.mul_channel(&w);
        assert_eq!(y.data(), &[10.0, 20.0, 300.0, 400.0]);
    }

    #[test]
    fn broadcast_channel_backward_sums() {
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::from_vec(vec![1.0f64, 2.0], &[2]));
        let grads = v.broadcast_channel(2, 3).sum().backward();
        assert_eq!(grads.get(&v), vec![6.0, 6.0]);
    }

    #[test]
    fn add_keymask_broadcasts_over_rows() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3]);
        let m = Tensor::from_vec(vec![0.0, -1e9, 0.0], &[1, 3]);
        let y = x.add_keymask(&m);
        assert_eq!(y.data()[..3], [0.0, -1e9, 0.0]);
        assert_eq!(y.data()[3..], [0.0, -1e9, 0.0]);
    }
}
