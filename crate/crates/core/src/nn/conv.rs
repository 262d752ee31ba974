//! 2-D cross-correlation lowered to matrix products.
//!
//! Each sample is unfolded into a `(Cin k k) x (OH OW)` column matrix
//! (im2col) and multiplied with the `Cout x (Cin k k)` kernel. Samples of a
//! batch are processed independently (in parallel with the `parallel`
//! feature); the kernel gradient is reduced over samples in batch order, so
//! results do not depend on the worker count.

use super::tensor::{GemmDims, Scalar, Strided, StridedMut, Tensor};
use crate::{par, Error, Result};

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Columns `ox` whose tap `kx` lands inside a row of width `w`.
fn col_range(ow: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Geometry> {
    let mismatch = || {
        Error::Shape(format!(
            "conv2d input {:?} incompatible with kernel {:?} (stride {stride}, pad {pad})",
            x.shape(),
            kernel.shape()
        ))
    };
    let (n, cin, h, w) = x.dims4().map_err(|_| mismatch())?;
    let (cout, kcin, kh, kw) = kernel.dims4().map_err(|_| mismatch())?;
    if kcin != cin || kh != kw || kh == 0 {
        return Err(mismatch());
    }
    let oh = out_dim(h, kh, stride, pad).ok_or_else(mismatch)?;
    let ow = out_dim(w, kw, stride, pad).ok_or_else(mismatch)?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        oh,
        ow,
        stride,
        pad,
    })
}

impl Geometry {
    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded conv reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits every in-bounds `(column row, output index, input index)`
    /// triple of one sample, one contiguous output run at a time.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ic in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ic * self.k + ky) * self.k + kx;
                    let (lo, hi) = col_range(self.ow, self.w, kx, self.stride, self.pad);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let iy = oy * self.stride + ky;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let src = (ic * self.h + iy - self.pad) * self.w + lo * self.stride + kx - self.pad;
                        f(row, oy * self.ow + lo, src, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, xs: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        let p = self.out_plane();
        let s = self.stride;
        self.for_each_run(|row, dst, src, len| {
            let out = &mut cols[row * p + dst..row * p + dst + len];
            if s == 1 {
                out.copy_from_slice(&xs[src..src + len]);
            } else {
                out.iter_mut().enumerate().for_each(|(i, o)| *o = xs[src + i * s]);
            }
        });
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.out_plane();
        let s = self.stride;
        self.for_each_run(|row, dst, src, len| {
            let from = &cols[row * p + dst..row * p + dst + len];
            if s == 1 {
                gx[src..src + len].iter_mut().zip(from).for_each(|(g, &c)| *g += c);
            } else {
                from.iter().enumerate().for_each(|(i, &c)| gx[src + i * s] += c);
            }
        });
    }
}

fn row_major<T>(data: &[T], cols: usize) -> Strided<'_, T> {
    Strided {
        data,
        row_stride: cols,
        col_stride: 1,
    }
}

fn transposed<T>(data: &[T], cols: usize) -> Strided<'_, T> {
    Strided {
        data,
        row_stride: 1,
        col_stride: cols,
    }
}

fn row_major_mut<T>(data: &mut [T], cols: usize) -> StridedMut<'_, T> {
    StridedMut {
        data,
        row_stride: cols,
        col_stride: 1,
    }
}

/// `N x Cin x H x W` input, `Cout x Cin x k x k` kernel, no kernel flip.
/// The output size is `floor((H + 2 pad - k) / stride) + 1`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = geometry(x, kernel, stride, pad)?;
    let in_sample = g.cin * g.h * g.w;
    let (p, taps) = (g.out_plane(), g.taps());
    let wk = kernel.data();
    let xd = x.data();

    let mut out = vec![T::zero(); g.n * g.cout * p];
    par::for_each_chunk_mut(&mut out, g.cout * p, |s, out_s| {
        let xs = &xd[s * in_sample..(s + 1) * in_sample];
        let mut buf = Vec::new();
        let cols = if g.is_pointwise() {
            xs
        } else {
            buf.resize(taps * p, T::zero());
            g.im2col(xs, &mut buf);
            &buf
        };
        let dims = GemmDims { m: g.cout, k: taps, n: p };
        T::gemm(dims, T::one(), row_major(wk, taps), row_major(cols, p), T::zero(), row_major_mut(out_s, p));
    });
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = geometry(x, kernel, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv2d grad_out {:?} does not match forward output [{}, {}, {}, {}]",
            grad_out.shape(),
            g.n,
            g.cout,
            g.oh,
            g.ow
        )));
    }
    let in_sample = g.cin * g.h * g.w;
    let (p, taps) = (g.out_plane(), g.taps());
    let wk = kernel.data();
    let xd = x.data();
    let god = grad_out.data();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = par::map_range(g.n, |s| {
        let xs = &xd[s * in_sample..(s + 1) * in_sample];
        let gs = &god[s * g.cout * p..(s + 1) * g.cout * p];
        let mut gw = vec![T::zero(); g.cout * taps];
        let mut gcols = vec![T::zero(); taps * p];
        // d kernel = grad_out * cols^T, d cols = kernel^T * grad_out
        let mut buf = Vec::new();
        let cols = if g.is_pointwise() {
            xs
        } else {
            buf.resize(taps * p, T::zero());
            g.im2col(xs, &mut buf);
            &buf
        };
        T::gemm(
            GemmDims { m: g.cout, k: p, n: taps },
            T::one(),
            row_major(gs, p),
            transposed(cols, p),
            T::zero(),
            row_major_mut(&mut gw, taps),
        );
        T::gemm(
            GemmDims { m: taps, k: g.cout, n: p },
            T::one(),
            transposed(wk, taps),
            row_major(gs, p),
            T::zero(),
            row_major_mut(&mut gcols, p),
        );
        let gx = if g.is_pointwise() {
            gcols
        } else {
            let mut gx = vec![T::zero(); in_sample];
            g.col2im_add(&gcols, &mut gx);
            gx
        };
        (gx, gw)
    });

    let mut grad_x = Vec::with_capacity(g.n * in_sample);
    let mut grad_w = vec![T::zero(); g.cout * taps];
    for (gx, gw) in per_sample {
        grad_x.extend_from_slice(&gx);
        grad_w.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), grad_x)?,
        Tensor::new(kernel.shape().to_vec(), grad_w)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops with explicit zero padding.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kk, _) = k.dims4().unwrap();
        let oh = (h + 2 * pad - kk) / stride + 1;
        let ow = (w + 2 * pad - kk) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..cin {
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((s * cin + ic) * h + iy as usize) * w + ix as usize];
                                    acc += xv * k.data()[((oc * cin + ic) * kk + ky) * kk + kx];
                                }
                            }
                        }
                        out[((s * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = seed::rng(1, "conv-id");
        let x = rand_tensor(&[2, 3, 5, 4], &mut rng);
        let mut k = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = seed::rng(2, "conv-naive");
        let cases = [(1, 1, 8, 3), (1, 0, 8, 3), (2, 1, 8, 3), (2, 1, 7, 3), (2, 0, 9, 3), (3, 2, 8, 3), (1, 0, 5, 1), (2, 0, 5, 1)];
        for &(stride, pad, h, kk) in &cases {
            let x = rand_tensor(&[2, 3, h, h], &mut rng);
            let k = rand_tensor(&[4, 3, kk, kk], &mut rng);
            let y = conv2d_forward(&x, &k, stride, pad).unwrap();
            let want = naive_conv(&x, &k, stride, pad);
            assert_eq!(y.len(), want.len());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {b}");
            }
            // the f32 path agrees too
            let y32 = conv2d_forward(&x.cast::<f32>(), &k.cast::<f32>(), stride, pad).unwrap();
            for (a, b) in y32.data().iter().zip(&want) {
                assert!((f64::from(*a) - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let msg = conv2d_forward(&x, &k, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
        let big = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        assert!(conv2d_forward(&Tensor::<f32>::zeros(&[1, 2, 2, 2]), &big, 1, 0).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = seed::rng(3, "conv-zero");
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let go = Tensor::zeros(&[2, 3, 5, 5]);
        let (gx, gk) = conv2d_backward(&x, &k, &go, 1, 1).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 3.0);
        let k = Tensor::<f64>::full(&[1, 1, 1, 1], -2.0);
        let go = Tensor::<f64>::full(&[1, 1, 1, 1], 0.5);
        let (gx, gk) = conv2d_backward(&x, &k, &go, 1, 0).unwrap();
        assert_eq!(gk.data(), &[3.0 * 0.5]);
        assert_eq!(gx.data(), &[-2.0 * 0.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::nn::gradcheck::{assert_close, numeric_grad};
        let mut rng = seed::rng(7, "conv-fd");
        for &(stride, pad, kk) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 0, 1)] {
            let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
            let k = rand_tensor(&[3, 2, kk, kk], &mut rng);
            let y = conv2d_forward(&x, &k, stride, pad).unwrap();
            let wts = rand_tensor(y.shape(), &mut rng);
            let obj = |x: &Tensor<f64>, k: &Tensor<f64>| -> f64 {
                let y = conv2d_forward(x, k, stride, pad).unwrap();
                y.data().iter().zip(wts.data()).map(|(a, b)| a * b).sum()
            };
            let (gx, gk) = conv2d_backward(&x, &k, &wts, stride, pad).unwrap();
            assert_close(&gx, &numeric_grad(&x, |t| obj(t, &k)));
            assert_close(&gk, &numeric_grad(&k, |t| obj(&x, t)));
        }
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &k, &Tensor::zeros(&[1, 1, 4, 4]), 1, 0).is_err());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut rng = seed::rng(4, "conv-threads");
        let x = rand_tensor(&[8, 3, 9, 9], &mut rng).cast::<f32>();
        let k = rand_tensor(&[5, 3, 3, 3], &mut rng).cast::<f32>();
        let go = rand_tensor(&[8, 5, 5, 5], &mut rng).cast::<f32>();
        let one = par::with_threads(1, || {
            (conv2d_forward(&x, &k, 2, 1).unwrap(), conv2d_backward(&x, &k, &go, 2, 1).unwrap())
        });
        let many = par::with_threads(4, || {
            (conv2d_forward(&x, &k, 2, 1).unwrap(), conv2d_backward(&x, &k, &go, 2, 1).unwrap())
        });
        assert_eq!(one, many);
    }
}
