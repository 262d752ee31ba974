//! ReLU, global average pooling and the fully connected head.

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    // `v < 0` is false for NaN, so non-finite values propagate to the loss
    y.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    y
}

/// Gradient through a ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu grad_out {:?} does not match output {:?}",
            grad_out.shape(),
            y.shape()
        )));
    }
    let g = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(y.shape().to_vec(), g)
}

/// `N x C x H x W` to `N x C`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let out = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::Shape(format!("pool input shape {input_shape:?} is not rank 4")));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::Shape(format!(
            "pool grad_out {:?} does not match [{n}, {c}]",
            grad_out.shape()
        )));
    }
    let inv = T::one() / T::of((h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// `y = x W^T + b` with `x: N x F`, `W: K x F`, `b: K`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    let (k, wf) = weight.dims2()?;
    if wf != f || bias.shape() != [k] {
        return Err(Error::Shape(format!(
            "linear input {:?} incompatible with weight {:?} and bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * k);
    for row in x.data().chunks(f) {
        for (wrow, &b) in weight.data().chunks(f).zip(bias.data()) {
            out.push(row.iter().zip(wrow).map(|(&a, &w)| a * w).sum::<T>() + b);
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f) = x.dims2()?;
    let (k, _) = weight.dims2()?;
    if grad_out.shape() != [n, k] {
        return Err(Error::Shape(format!(
            "linear grad_out {:?} does not match [{n}, {k}]",
            grad_out.shape()
        )));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); k * f];
    let mut gb = vec![T::zero(); k];
    for s in 0..n {
        for j in 0..k {
            let g = gd[s * k + j];
            gb[j] += g;
            for i in 0..f {
                gx[s * f + i] += g * wd[j * f + i];
                gw[j * f + i] += g * xd[s * f + i];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, f], gx)?,
        Tensor::new(vec![k, f], gw)?,
        Tensor::new(vec![k], gb)?,
    ))
}
