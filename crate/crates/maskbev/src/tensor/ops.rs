//! Elementwise, shape and reduction ops with their backward rules.

use std::sync::Arc;

use super::tape::{record, record_selective};
use super::{axis_split, shape_mismatch, t, Scalar, Tensor};

/// How the right-hand operand maps onto the left one.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// RHS shape is a suffix of the LHS shape; repeats = leading product.
    Suffix(usize),
}

fn bcast_kind<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Bcast {
    if a.shape() == b.shape() {
        Bcast::Same
    } else if b.numel() == 1 {
        Bcast::Scalar
    } else if a.shape().len() > b.shape().len() && a.shape().ends_with(b.shape()) {
        Bcast::Suffix(a.numel() / b.numel())
    } else {
        shape_mismatch(op, a.shape(), b.shape());
    }
}

/// Reduce a broadcast gradient back to the RHS shape.
fn reduce_to_rhs<T: Scalar>(grad: &[T], kind: &Bcast, rhs_numel: usize) -> Vec<T> {
    match kind {
        Bcast::Same => grad.to_vec(),
        Bcast::Scalar => vec![grad.iter().fold(T::zero(), |a, &g| a + g)],
        Bcast::Suffix(reps) => {
            let mut out = vec![T::zero(); rhs_numel];
            for r in 0..*reps {
                let base = r * rhs_numel;
                for i in 0..rhs_numel {
                    out[i] = out[i] + grad[base + i];
                }
            }
            out
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let kind = bcast_kind("add", self, rhs);
        let b = rhs.data();
        let n = rhs.numel();
        let out: Vec<T> = match kind {
            Bcast::Same => self.data().iter().zip(b).map(|(&x, &y)| x + y).collect(),
            Bcast::Scalar => self.data().iter().map(|&x| x + b[0]).collect(),
            Bcast::Suffix(_) => self
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b[i % n])
                .collect(),
        };
        record_selective("add", &[self, rhs], out, self.shape().to_vec(), |mask| {
            let needs = (mask[0], mask[1]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    grads.push(g.to_vec());
                }
                if needs.1 {
                    grads.push(reduce_to_rhs(g, &kind, n));
                }
                grads
            })
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let kind = bcast_kind("sub", self, rhs);
        let b = rhs.data();
        let n = rhs.numel();
        let out: Vec<T> = match kind {
            Bcast::Same => self.data().iter().zip(b).map(|(&x, &y)| x - y).collect(),
            Bcast::Scalar => self.data().iter().map(|&x| x - b[0]).collect(),
            Bcast::Suffix(_) => self
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x - b[i % n])
                .collect(),
        };
        record_selective("sub", &[self, rhs], out, self.shape().to_vec(), |mask| {
            let needs = (mask[0], mask[1]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    grads.push(g.to_vec());
                }
                if needs.1 {
                    let mut r = reduce_to_rhs(g, &kind, n);
                    for v in &mut r {
                        *v = -*v;
                    }
                    grads.push(r);
                }
                grads
            })
        })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let kind = bcast_kind("mul", self, rhs);
        let b = rhs.data();
        let n = rhs.numel();
        let out: Vec<T> = match kind {
            Bcast::Same => self.data().iter().zip(b).map(|(&x, &y)| x * y).collect(),
            Bcast::Scalar => self.data().iter().map(|&x| x * b[0]).collect(),
            Bcast::Suffix(_) => self
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x * b[i % n])
                .collect(),
        };
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        record_selective("mul", &[self, rhs], out, self.shape().to_vec(), |mask| {
            let needs = (mask[0], mask[1]);
            Box::new(move |g| {
                let mut grads = Vec::new();
                if needs.0 {
                    let da: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| match kind {
                            Bcast::Same => gi * b_data[i],
                            Bcast::Scalar => gi * b_data[0],
                            Bcast::Suffix(_) => gi * b_data[i % n],
                        })
                        .collect();
                    grads.push(da);
                }
                if needs.1 {
                    let ga: Vec<T> = g.iter().zip(a_data.iter()).map(|(&gi, &ai)| gi * ai).collect();
                    grads.push(reduce_to_rhs(&ga, &kind, n));
                }
                grads
            })
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = t::<T>(c);
        let out: Vec<T> = self.data().iter().map(|&x| x + c).collect();
        record("add_scalar", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| vec![g.to_vec()])
        })
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = t::<T>(c);
        let out: Vec<T> = self.data().iter().map(|&x| x * c).collect();
        record("mul_scalar", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| vec![g.iter().map(|&gi| gi * c).collect()])
        })
    }

    pub fn exp(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x.exp()).collect();
        let saved = Arc::new(out.clone());
        record("exp", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| vec![g.iter().zip(saved.iter()).map(|(&gi, &y)| gi * y).collect()])
        })
    }

    /// Natural log. The caller guarantees strictly positive inputs; see
    /// [`Tensor::clamped_log`] for the guarded variant.
    pub fn log(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x.ln()).collect();
        let x = self.data_arc();
        record("log", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| vec![g.iter().zip(x.iter()).map(|(&gi, &xi)| gi / xi).collect()])
        })
    }

    /// `ln(max(x, eps))`: log with a floored argument so values at or below
    /// zero stay finite. Gradient is `1/x` above the floor and `0` below it.
    pub fn clamped_log(&self, eps: f64) -> Tensor<T> {
        let eps = t::<T>(eps);
        let out: Vec<T> = self.data().iter().map(|&x| x.max(eps).ln()).collect();
        let x = self.data_arc();
        record("clamped_log", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi > eps { gi / xi } else { T::zero() })
                    .collect()]
            })
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let x = self.data_arc();
        record("relu", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect()]
            })
        })
    }

    /// Elementwise power with a constant, non-negative base assumed when the
    /// exponent is fractional.
    pub fn pow_scalar(&self, p: f64) -> Tensor<T> {
        let pc = t::<T>(p);
        let out: Vec<T> = self.data().iter().map(|&x| x.powf(pc)).collect();
        let x = self.data_arc();
        record("pow_scalar", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| gi * pc * xi.powf(pc - T::one()))
                    .collect()]
            })
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let saved = Arc::new(out.clone());
        record("sigmoid", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(saved.iter())
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect()]
            })
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| gelu_forward(x)).collect();
        let x = self.data_arc();
        record("gelu", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| gi * gelu_grad(xi))
                    .collect()]
            })
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |a, &x| a + x);
        let n = self.numel();
        record("sum", &[self], vec![s], vec![], || {
            Box::new(move |g| vec![vec![g[0]; n]])
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        assert!(n > 0, "mean: empty tensor");
        let inv = T::from_usize(n).unwrap().recip();
        let s = self.data().iter().fold(T::zero(), |a, &x| a + x) * inv;
        record("mean", &[self], vec![s], vec![], || {
            Box::new(move |g| vec![vec![g[0] * inv; n]])
        })
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Tensor<T> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                let obase = o * inner;
                for k in 0..inner {
                    out[obase + k] = out[obase + k] + self.data()[base + k];
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        record("sum_axis", &[self], out, out_shape, || {
            Box::new(move |g| {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        let base = (o * len + i) * inner;
                        let gbase = o * inner;
                        dx[base..base + inner].copy_from_slice(&g[gbase..gbase + inner]);
                    }
                }
                vec![dx]
            })
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor<T> {
        let len = self.shape()[axis];
        self.sum_axis(axis).mul_scalar(1.0 / len as f64)
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<T> {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: cannot view shape {:?} as {:?}",
            self.shape(),
            new_shape
        );
        let out = self.to_vec();
        record("reshape", &[self], out, new_shape.to_vec(), || {
            Box::new(move |g| vec![g.to_vec()])
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor<T> {
        assert_eq!(
            self.shape().len(),
            2,
            "transpose: expected rank 2, got shape {:?}",
            self.shape()
        );
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        transpose_into(self.data(), &mut out, r, c);
        record("transpose", &[self], out, vec![c, r], || {
            Box::new(move |g| {
                let mut dx = vec![T::zero(); r * c];
                transpose_into(g, &mut dx, c, r);
                vec![dx]
            })
        })
    }

    /// Concatenate along `axis`. All parts must agree on the other extents.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = parts[0].shape();
        let mut out_shape = first.to_vec();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {s:?} vs {first:?}");
            for (ax, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if ax != axis && a != b {
                    shape_mismatch("concat", s, first);
                }
            }
            total += s[axis];
        }
        out_shape[axis] = total;

        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&p.data()[src..src + len * inner]);
            }
            offset += len;
        }

        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        record_selective("concat", parts, out, out_shape, |mask| {
            let mask = mask.to_vec();
            let sizes = sizes.clone();
            Box::new(move |g| {
                let mut grads = Vec::new();
                let mut offset = 0;
                for (idx, &len) in sizes.iter().enumerate() {
                    if mask[idx] {
                        let mut pg = vec![T::zero(); outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            pg[dst..dst + len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        grads.push(pg);
                    }
                    offset += len;
                }
                grads
            })
        })
    }

    /// Split along `axis` into consecutive chunks of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Vec<Tensor<T>> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        assert_eq!(
            sizes.iter().sum::<usize>(),
            len,
            "split: sizes {:?} do not cover axis {} of shape {:?}",
            sizes,
            axis,
            self.shape()
        );
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &sz in sizes {
            let mut part = vec![T::zero(); outer * sz * inner];
            for o in 0..outer {
                let src = (o * len + offset) * inner;
                let dst = o * sz * inner;
                part[dst..dst + sz * inner].copy_from_slice(&self.data()[src..src + sz * inner]);
            }
            let mut part_shape = self.shape().to_vec();
            part_shape[axis] = sz;
            let start = offset;
            let piece = record("split", &[self], part, part_shape, || {
                Box::new(move |g| {
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * sz * inner;
                        dx[dst..dst + sz * inner].copy_from_slice(&g[src..src + sz * inner]);
                    }
                    vec![dx]
                })
            });
            out.push(piece);
            offset += sz;
        }
        out
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x.abs()).collect();
        let x = self.data_arc();
        record("abs", &[self], out, self.shape().to_vec(), || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect()]
            })
        })
    }

    /// Select rows of a rank-2 tensor by index; indices may repeat, the
    /// backward pass scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor<T> {
        assert_eq!(
            self.shape().len(),
            2,
            "gather_rows: expected rank 2, got shape {:?}",
            self.shape()
        );
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        for &i in indices {
            assert!(i < rows, "gather_rows: index {i} out of range {rows}");
        }
        let mut out = vec![T::zero(); indices.len() * cols];
        for (r, &i) in indices.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let idx: Vec<usize> = indices.to_vec();
        record("gather_rows", &[self], out, vec![indices.len(), cols], || {
            Box::new(move |g| {
                let mut dx = vec![T::zero(); rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] = dx[i * cols + c] + g[r * cols + c];
                    }
                }
                vec![dx]
            })
        })
    }
}

#[inline]
pub(crate) fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = t::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = t::<T>(0.044715);
    let half = t::<T>(0.5);
    let inner = c * (x + b * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = t::<T>(0.797_884_560_802_865_4);
    let b = t::<T>(0.044715);
    let half = t::<T>(0.5);
    let three = t::<T>(3.0);
    let inner = c * (x + b * x * x * x);
    let tanh = inner.tanh();
    let sech2 = T::one() - tanh * tanh;
    half * (T::one() + tanh) + half * x * sech2 * c * (T::one() + three * b * x * x)
}

#[inline]
pub(crate) fn transpose_into<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
