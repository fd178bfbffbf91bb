//! 2-D convolution (stride 1, configurable dilation and zero padding) via
//! im2col and the shared matmul kernel. The column matrix is rebuilt in the
//! backward pass instead of being saved; it is cheap next to the products.

use super::kernels::matmul;
use super::ops::transpose_into;
use super::tape::record_selective;
use super::{shape_mismatch, Scalar, Tensor};

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

fn im2col<T: Scalar>(x: &[T], d: ConvDims) -> Vec<T> {
    let k = d.c_in * d.kh * d.kw;
    let hw_out = d.h_out * d.w_out;
    let mut col = vec![T::zero(); k * hw_out];
    for ci in 0..d.c_in {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy + ki * d.dilation) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.w_out {
                        let ix = (ox + kj * d.dilation) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dst[oy * d.w_out + ox] = x[(ci * d.h + iy) * d.w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im_acc<T: Scalar>(col: &[T], d: ConvDims) -> Vec<T> {
    let hw_out = d.h_out * d.w_out;
    let mut x = vec![T::zero(); d.c_in * d.h * d.w];
    for ci in 0..d.c_in {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy + ki * d.dilation) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.w_out {
                        let ix = (ox + kj * d.dilation) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let idx = (ci * d.h + iy) * d.w + ix as usize;
                        x[idx] = x[idx] + src[oy * d.w_out + ox];
                    }
                }
            }
        }
    }
    x
}

impl<T: Scalar> Tensor<T> {
    /// Convolve a `[C_in,H,W]` map with a `[C_out,C_in,kh,kw]` kernel at
    /// stride 1. Output is `[C_out, H+2p-d(kh-1), W+2p-d(kw-1)]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        dilation: usize,
        padding: usize,
    ) -> Tensor<T> {
        if self.shape().len() != 3 || weight.shape().len() != 4 || self.shape()[0] != weight.shape()[1]
        {
            shape_mismatch("conv2d", self.shape(), weight.shape());
        }
        assert!(dilation >= 1, "conv2d: dilation must be >= 1");
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (c_out, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        let span_h = dilation * (kh - 1);
        let span_w = dilation * (kw - 1);
        assert!(
            h + 2 * padding > span_h && w + 2 * padding > span_w,
            "conv2d: kernel span exceeds padded input ({h}x{w}, pad {padding}, dilation {dilation}, kernel {kh}x{kw})"
        );
        let d = ConvDims {
            c_in,
            h,
            w,
            kh,
            kw,
            dilation,
            padding,
            h_out: h + 2 * padding - span_h,
            w_out: w + 2 * padding - span_w,
        };
        if let Some(b) = bias {
            if b.numel() != c_out {
                shape_mismatch("conv2d bias", b.shape(), weight.shape());
            }
        }

        let k = c_in * kh * kw;
        let hw_out = d.h_out * d.w_out;
        let col = im2col(self.data(), d);
        let mut out = matmul(weight.data(), &col, c_out, k, hw_out);
        if let Some(b) = bias {
            for co in 0..c_out {
                let bv = b.data()[co];
                for v in &mut out[co * hw_out..(co + 1) * hw_out] {
                    *v = *v + bv;
                }
            }
        }

        let x_saved = self.data_arc();
        let w_saved = weight.data_arc();
        let mut inputs: Vec<&Tensor<T>> = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let out_shape = vec![c_out, d.h_out, d.w_out];
        record_selective("conv2d", &inputs, out, out_shape, |mask| {
            let mask = mask.to_vec();
            Box::new(move |g| {
                let mut grads = Vec::new();
                if mask[0] {
                    // d_x = col2im(W^T . g)
                    let mut wt = vec![T::zero(); k * c_out];
                    transpose_into(&w_saved, &mut wt, c_out, k);
                    let d_col = matmul(&wt, g, k, c_out, hw_out);
                    grads.push(col2im_acc(&d_col, d));
                }
                if mask[1] {
                    // d_W = g . col^T (col rebuilt from the saved input)
                    let col = im2col(&x_saved, d);
                    let mut col_t = vec![T::zero(); hw_out * k];
                    transpose_into(&col, &mut col_t, k, hw_out);
                    grads.push(matmul(g, &col_t, c_out, hw_out, k));
                }
                if mask.len() > 2 && mask[2] {
                    let mut db = vec![T::zero(); c_out];
                    for co in 0..c_out {
                        let mut s = T::zero();
                        for v in &g[co * hw_out..(co + 1) * hw_out] {
                            s = s + *v;
                        }
                        db[co] = s;
                    }
                    grads.push(db);
                }
                grads
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    /// Direct sliding-window summation, the oracle for conv2d.
    fn conv2d_naive(
        x: &[f64],
        w: &[f64],
        (c_in, h, wd): (usize, usize, usize),
        (c_out, kh, kw): (usize, usize, usize),
        dilation: usize,
        padding: usize,
    ) -> Vec<f64> {
        let h_out = h + 2 * padding - dilation * (kh - 1);
        let w_out = wd + 2 * padding - dilation * (kw - 1);
        let mut out = vec![0.0; c_out * h_out * w_out];
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut s = 0.0;
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy + ki * dilation) as isize - padding as isize;
                                let ix = (ox + kj * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x[(ci * h + iy as usize) * wd + ix as usize]
                                    * w[((co * c_in + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[(co * h_out + oy) * w_out + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn dilated_all_ones_center_is_nine() {
        // 3x3 all-ones kernel over a 5x5 all-ones input, dilation 2, no pad:
        // a single output cell covering nine taps.
        let x = Tensor::from_vec(vec![1.0f64; 25], &[1, 5, 5]);
        let w = Tensor::from_vec(vec![1.0f64; 9], &[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 2, 0);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let (c_in, h, wd) = (2, 6, 5);
        let (c_out, kh, kw) = (3, 3, 3);
        for &(dil, pad) in &[(1usize, 1usize), (2, 2), (1, 0)] {
            let x: Vec<f64> = (0..c_in * h * wd).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..c_out * c_in * kh * kw)
                .map(|i| ((i * 17 % 7) as f64) * 0.25 - 0.5)
                .collect();
            let xt = Tensor::from_vec(x.clone(), &[c_in, h, wd]);
            let wt = Tensor::from_vec(w.clone(), &[c_out, c_in, kh, kw]);
            let y = xt.conv2d(&wt, None, dil, pad);
            let oracle = conv2d_naive(&x, &w, (c_in, h, wd), (c_out, kh, kw), dil, pad);
            assert_eq!(y.data().len(), oracle.len());
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "conv2d differs from oracle: {a} vs {b}");
            }
        }
    }

    #[test]
    fn one_by_one_identity_kernel_is_exact_identity() {
        let c = 3;
        let x: Vec<f64> = (0..c * 4 * 4).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        let xt = Tensor::from_vec(x.clone(), &[c, 4, 4]);
        let wt = Tensor::from_vec(w, &[c, c, 1, 1]);
        let y = xt.conv2d(&wt, None, 1, 0);
        assert_eq!(y.data(), &x[..], "identity conv must be bit-exact");
    }

    #[test]
    fn bias_reaches_every_cell() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        let w = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
        let b = Tensor::from_vec(vec![1.5, -2.0], &[2]);
        let y = x.conv2d(&w, Some(&b), 1, 0);
        assert_eq!(&y.data()[..9], &[1.5; 9]);
        assert_eq!(&y.data()[9..], &[-2.0; 9]);
    }

    #[test]
    fn backward_shapes_and_bias_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec((0..18).map(|i| i as f64 * 0.1).collect(), &[2, 3, 3]));
        let w = tape.leaf(&Tensor::from_vec(vec![0.5; 2 * 2 * 3 * 3], &[2, 2, 3, 3]));
        let b = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0], &[2]));
        let y = x.conv2d(&w, Some(&b), 1, 1);
        let grads = y.sum().backward();
        assert_eq!(grads.get(&x).len(), 18);
        assert_eq!(grads.get(&w).len(), 36);
        // every output cell feeds each bias once
        assert_eq!(grads.get(&b), vec![9.0, 9.0]);
    }
}
