//! Residual blocks: `y = relu(F(x) + shortcut(x))`.
//!
//! `F` is a chain of conv + batch-norm units with ReLU between them (not
//! after the last). The shortcut is the identity, or a strided 1x1 conv +
//! batch norm when the block downsamples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, Mode};
use super::conv::{conv2d_backward, conv2d_forward};
use super::layers::{relu_backward, relu_forward};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convs.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (by [`BOTTLENECK_EXPANSION`]).
    Bottleneck,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    /// Width of the inner convs.
    pub width: usize,
    pub stride: usize,
    pub downsample: bool,
}

impl BlockSpec {
    pub fn out_channels(&self) -> usize {
        match self.kind {
            BlockKind::Basic => self.width,
            BlockKind::Bottleneck => self.width * BOTTLENECK_EXPANSION,
        }
    }

    /// `(in, out, kernel, stride, pad)` of each unit of `F`.
    pub fn units(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let (c, w, s) = (self.in_channels, self.width, self.stride);
        match self.kind {
            BlockKind::Basic => vec![(c, w, 3, s, 1), (w, w, 3, 1, 1)],
            BlockKind::Bottleneck => vec![(c, w, 1, 1, 0), (w, w, 3, s, 1), (w, self.out_channels(), 1, 1, 0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.stride == 0 {
            return Err(Error::Shape(format!("block {self:?} has a zero dimension")));
        }
        if !self.downsample && (self.in_channels != self.out_channels() || self.stride != 1) {
            return Err(Error::Shape(format!(
                "block maps {} to {} channels at stride {} but has no downsample projection",
                self.in_channels,
                self.out_channels(),
                self.stride
            )));
        }
        Ok(())
    }
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T = f32> {
    pub kernel: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvBn<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[cout, cin, k, k]),
            bn: BatchNorm::new(cout),
            stride,
            pad,
        }
    }

    /// Kaiming-uniform fan-in initialization of the kernel.
    pub fn init(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let mut unit = Self::zeros(cin, cout, k, stride, pad);
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        unit.kernel
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = T::of(rng.random_range(-bound..bound)));
        unit
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let z = conv2d_forward(x, &self.kernel, self.stride, self.pad)?;
        batchnorm_forward(&z, &mut self.bn, mode)
    }

    /// Returns the input gradient and the unit's parameter gradients.
    pub fn backward(&self, x: &Tensor<T>, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, ConvBnGrads<T>)> {
        let (gz, scale, shift) = batchnorm_backward(cache, &self.bn.scale, grad_out)?;
        let (gx, kernel) = conv2d_backward(x, &self.kernel, &gz, self.stride, self.pad)?;
        Ok((gx, ConvBnGrads { kernel, scale, shift }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnGrads<T = f32> {
    pub kernel: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T = f32> {
    pub units: Vec<ConvBn<T>>,
    pub projection: Option<ConvBn<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn build(spec: &BlockSpec, mut unit: impl FnMut(usize, usize, usize, usize, usize) -> ConvBn<T>) -> Result<Self> {
        spec.validate()?;
        let units = spec.units().into_iter().map(|(i, o, k, s, p)| unit(i, o, k, s, p)).collect();
        let projection = spec
            .downsample
            .then(|| unit(spec.in_channels, spec.out_channels(), 1, spec.stride, 0));
        Ok(Self { units, projection })
    }

    /// All kernels zero, norms at identity.
    pub fn zeros(spec: &BlockSpec) -> Result<Self> {
        Self::build(spec, ConvBn::zeros)
    }

    pub fn init(spec: &BlockSpec, rng: &mut impl Rng) -> Result<Self> {
        Self::build(spec, |i, o, k, s, p| ConvBn::init(i, o, k, s, p, rng))
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache<T = f32> {
    /// Input of each unit; entry 0 is the block input.
    inputs: Vec<Tensor<T>>,
    bn: Vec<BnCache<T>>,
    projection: Option<BnCache<T>>,
    output: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T = f32> {
    pub units: Vec<ConvBnGrads<T>>,
    pub projection: Option<ConvBnGrads<T>>,
}

pub fn residual_block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &mut ResidualBlock<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let mut inputs = vec![x.clone()];
    let mut caches = Vec::with_capacity(block.units.len());
    let last = block.units.len() - 1;
    let mut h = x.clone();
    for (i, unit) in block.units.iter_mut().enumerate() {
        let (z, cache) = unit.forward(&h, mode)?;
        caches.push(cache);
        if i < last {
            h = relu_forward(&z);
            inputs.push(h.clone());
        } else {
            h = z;
        }
    }
    let (shortcut, proj_cache) = match &mut block.projection {
        Some(p) => {
            let (s, c) = p.forward(x, mode)?;
            (s, Some(c))
        }
        None => (x.clone(), None),
    };
    if shortcut.shape() != h.shape() {
        return Err(Error::Shape(format!(
            "residual branch output {:?} cannot be added to shortcut {:?}; the block needs a downsample projection",
            h.shape(),
            shortcut.shape()
        )));
    }
    h.add_assign(&shortcut)?;
    let y = relu_forward(&h);
    Ok((
        y.clone(),
        BlockCache {
            inputs,
            bn: caches,
            projection: proj_cache,
            output: y,
        },
    ))
}

/// Returns the input gradient and the block's parameter gradients.
pub fn residual_block_backward<T: Scalar>(
    block: &ResidualBlock<T>,
    cache: &BlockCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BlockGrads<T>)> {
    let g_sum = relu_backward(&cache.output, grad_out)?;
    let mut g = g_sum.clone();
    let mut unit_grads = Vec::with_capacity(block.units.len());
    for i in (0..block.units.len()).rev() {
        let (gx, grads) = block.units[i].backward(&cache.inputs[i], &cache.bn[i], &g)?;
        unit_grads.push(grads);
        g = if i > 0 { relu_backward(&cache.inputs[i], &gx)? } else { gx };
    }
    unit_grads.reverse();

    let projection = match (&block.projection, &cache.projection) {
        (Some(p), Some(pc)) => {
            let (gx, grads) = p.backward(&cache.inputs[0], pc, &g_sum)?;
            g.add_assign(&gx)?;
            Some(grads)
        }
        (None, None) => {
            g.add_assign(&g_sum)?;
            None
        }
        _ => return Err(Error::Shape("block cache does not match block layout".into())),
    };
    Ok((
        g,
        BlockGrads {
            units: unit_grads,
            projection,
        },
    ))
}
