//! Per-channel batch normalization over `N x C x H x W` activations.

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    /// Scale one, shift zero, running mean zero, running variance one.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache<T = f32> {
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

fn check_channels<T: Scalar>(x: &Tensor<T>, bn: &BatchNorm<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let ok = [&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var]
        .iter()
        .all(|t| t.shape() == [c]);
    if !ok {
        return Err(Error::Shape(format!(
            "batch norm with {} channels applied to input {:?}",
            bn.channels(),
            x.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// Normalizes `x`. In train mode the batch statistics are used and the
/// running statistics are updated in place (running variance takes the
/// unbiased batch estimate); in eval mode the running statistics are used.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    bn: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, plane) = check_channels(x, bn)?;
    let m = n * plane;
    let xd = x.data();
    let eps = T::of(BN_EPS);

    let (mean, var) = match mode {
        Mode::Train => {
            if m <= 1 {
                return Err(Error::DegenerateVariance(format!(
                    "train-mode batch norm needs more than one value per channel, input is {:?}",
                    x.shape()
                )));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mf = T::of(m as f64);
            for ch in 0..c {
                let values = || (0..n).flat_map(move |s| &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
                let mu = values().copied().sum::<T>() / mf;
                let v = values().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
                mean[ch] = mu;
                var[ch] = v;
            }
            let mom = T::of(BN_MOMENTUM);
            let unbias = mf / T::of((m - 1) as f64);
            for ch in 0..c {
                let rm = &mut bn.running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut bn.running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let (scale, shift) = (bn.scale.data(), bn.shift.data());
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for i in range {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnCache {
            shape: x.shape().to_vec(),
            x_hat,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(grad_x, grad_scale, grad_shift)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "batch norm grad_out {:?} does not match forward input {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let (n, c, plane) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
    if scale.shape() != [c] {
        return Err(Error::Shape(format!("batch norm scale {:?} for {c} channels", scale.shape())));
    }
    let gy = grad_out.data();
    let mut g_scale = vec![T::zero(); c];
    let mut g_shift = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                g_shift[ch] += gy[i];
                g_scale[ch] += gy[i] * cache.x_hat[i];
            }
        }
    }

    let mut gx = vec![T::zero(); gy.len()];
    let mf = T::of((n * plane) as f64);
    for s in 0..n {
        for ch in 0..c {
            let k = scale.data()[ch] * cache.inv_std[ch];
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                gx[i] = match cache.mode {
                    Mode::Eval => k * gy[i],
                    Mode::Train => k * (gy[i] - g_shift[ch] / mf - cache.x_hat[i] * g_scale[ch] / mf),
                };
            }
        }
    }
    Ok((
        Tensor::new(cache.shape.clone(), gx)?,
        Tensor::new(vec![c], g_scale)?,
        Tensor::new(vec![c], g_shift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, numeric_grad, random_tensor};
    use crate::seed;

    #[test]
    fn standardized_batch_passes_through() {
        // each channel holds {-1, 1} repeated, so mean 0 and variance 1
        let data: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let x = Tensor::new(vec![2, 2, 2, 2], data).unwrap();
        let mut bn = BatchNorm::<f64>::new(2);
        let (y, _) = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_mode_is_affine() {
        let mut rng = seed::rng(5, "bn-eval");
        let x = random_tensor(&[3, 2, 2, 2], &mut rng);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.scale = Tensor::new(vec![2], vec![2.0, -0.5]).unwrap();
        bn.shift = Tensor::new(vec![2], vec![0.25, 1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut bn, Mode::Eval).unwrap();
        let k = 1.0 / (1.0 + BN_EPS).sqrt();
        for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
            let ch = (i / 4) % 2;
            let want = bn.scale.data()[ch] * b * k + bn.shift.data()[ch];
            assert!((a - want).abs() < 1e-12);
        }
        assert_eq!(bn.running_mean.data(), &[0.0, 0.0], "eval must not touch running stats");
    }

    #[test]
    fn running_stats_use_momentum() {
        let x = Tensor::new(vec![4, 1, 1, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut bn = BatchNorm::<f64>::new(1);
        batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.1 * 2.5).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let x = Tensor::<f32>::zeros(&[1, 3, 1, 1]);
        let mut bn = BatchNorm::new(3);
        assert!(matches!(
            batchnorm_forward(&x, &mut bn, Mode::Train),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(batchnorm_forward(&x, &mut bn, Mode::Eval).is_ok());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[2, 3, 2, 2]);
        let mut bn = BatchNorm::new(4);
        assert!(matches!(batchnorm_forward(&x, &mut bn, Mode::Train), Err(Error::Shape(_))));
    }

    fn check_gradients(mode: Mode) {
        let mut rng = seed::rng(6, "bn-grad");
        let x = random_tensor(&[3, 2, 3, 2], &mut rng);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.scale = random_tensor(&[2], &mut rng);
        bn.shift = random_tensor(&[2], &mut rng);
        bn.running_mean = random_tensor(&[2], &mut rng);
        bn.running_var = Tensor::new(vec![2], vec![0.7, 1.3]).unwrap();
        let weights = random_tensor(&[3, 2, 3, 2], &mut rng);
        // scalar objective: weighted sum of the outputs
        let objective = |x: &Tensor<f64>, bn: &BatchNorm<f64>| -> f64 {
            let mut bn = bn.clone();
            let (y, _) = batchnorm_forward(x, &mut bn, mode).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = batchnorm_forward(&x, &mut bn.clone(), mode).unwrap();
        let (gx, gs, gb) = batchnorm_backward(&cache, &bn.scale, &weights).unwrap();

        assert_close(&gx, &numeric_grad(&x, |t| objective(t, &bn)));
        assert_close(
            &gs,
            &numeric_grad(&bn.scale, |t| {
                let mut b = bn.clone();
                b.scale = t.clone();
                objective(&x, &b)
            }),
        );
        assert_close(
            &gb,
            &numeric_grad(&bn.shift, |t| {
                let mut b = bn.clone();
                b.shift = t.clone();
                objective(&x, &b)
            }),
        );
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        check_gradients(Mode::Train);
    }

    #[test]
    fn eval_gradients_match_finite_differences() {
        check_gradients(Mode::Eval);
    }
}
