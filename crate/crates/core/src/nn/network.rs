//! The residual classifier: stem conv, stages of residual blocks, global
//! average pool and a linear head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{BnCache, Mode};
use super::layers::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward, relu_backward,
    relu_forward,
};
use super::loss::softmax;
use super::optim::{step_named, OptimizerState, Parameters};
use super::residual::{
    residual_block_backward, residual_block_forward, BlockCache, BlockKind, BlockSpec, ConvBn, ConvBnGrads,
    ResidualBlock,
};
use super::tensor::{Scalar, Tensor};
use crate::{seed, Error, Result, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    /// Edge length of the square input in pixels.
    pub input_size: usize,
    pub block: BlockKind,
}

impl Default for NetworkConfig {
    /// A ResNet-20-sized model on 32x32 inputs.
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stage_blocks: vec![2, 2, 2],
            stage_channels: vec![16, 32, 64],
            num_classes: NUM_CLASSES,
            input_size: 32,
            block: BlockKind::Basic,
        }
    }
}

impl NetworkConfig {
    /// One basic block at 8 channels on 8x8 inputs.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stage_blocks: vec![1],
            stage_channels: vec![8],
            input_size: 8,
            ..Self::default()
        }
    }

    /// The ResNet-50 stage layout (bottleneck blocks 3-4-6-3).
    pub fn resnet50(input_size: usize) -> Self {
        Self {
            stem_channels: 64,
            stage_blocks: vec![3, 4, 6, 3],
            stage_channels: vec![64, 128, 256, 512],
            input_size,
            block: BlockKind::Bottleneck,
            ..Self::default()
        }
    }

    /// Every violated constraint, as readable messages.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stage_blocks.len() != self.stage_channels.len() {
            out.push(format!(
                "stage_blocks has {} entries but stage_channels has {}",
                self.stage_blocks.len(),
                self.stage_channels.len()
            ));
        }
        if self.stage_blocks.is_empty() {
            out.push("at least one stage is required".into());
        }
        if self.stage_blocks.iter().chain(&self.stage_channels).any(|&v| v == 0) {
            out.push("stage block and channel counts must be at least 1".into());
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            out.push("in_channels and stem_channels must be at least 1".into());
        }
        if self.num_classes != NUM_CLASSES {
            out.push(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        let min_size = 1usize << self.stage_blocks.len().saturating_sub(1);
        if self.input_size < min_size {
            out.push(format!(
                "input_size {} is too small for {} stages (need at least {min_size})",
                self.input_size,
                self.stage_blocks.len()
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Stage index and spec of every block, in forward order. The first
    /// block of each stage after the first halves the resolution.
    pub fn block_specs(&self) -> Vec<(usize, BlockSpec)> {
        let mut specs = Vec::new();
        let mut channels = self.stem_channels;
        for (stage, (&blocks, &width)) in self.stage_blocks.iter().zip(&self.stage_channels).enumerate() {
            for b in 0..blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let mut spec = BlockSpec {
                    kind: self.block,
                    in_channels: channels,
                    width,
                    stride,
                    downsample: false,
                };
                spec.downsample = stride != 1 || channels != spec.out_channels();
                channels = spec.out_channels();
                specs.push((stage, spec));
            }
        }
        specs
    }

    pub fn feature_channels(&self) -> usize {
        self.block_specs()
            .last()
            .map_or(self.stem_channels, |(_, s)| s.out_channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trained by the optimizer.
    Param,
    /// Running normalization statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    pub stem: ConvBn<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Activations kept by [`Network::forward_train`].
#[derive(Debug, Clone)]
pub struct NetworkCache<T = f32> {
    input: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    pool_shape: Vec<usize>,
    features: Tensor<T>,
}

fn conv_bn_names(prefix: &str, conv: &str, bn: &str) -> [String; 5] {
    [
        format!("{prefix}{conv}.weight"),
        format!("{prefix}{bn}.weight"),
        format!("{prefix}{bn}.bias"),
        format!("{prefix}{bn}.running_mean"),
        format!("{prefix}{bn}.running_var"),
    ]
}

const KINDS: [TensorKind; 5] = [
    TensorKind::Param,
    TensorKind::Param,
    TensorKind::Param,
    TensorKind::Buffer,
    TensorKind::Buffer,
];

impl<T: Scalar> Network<T> {
    fn build(
        config: &NetworkConfig,
        mut stem: impl FnMut(usize, usize) -> ConvBn<T>,
        mut block: impl FnMut(&BlockSpec) -> Result<ResidualBlock<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let stem = stem(config.in_channels, config.stem_channels);
        let blocks = config
            .block_specs()
            .iter()
            .map(|(_, s)| block(s))
            .collect::<Result<_>>()?;
        let f = config.feature_channels();
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            head_weight: Tensor::zeros(&[config.num_classes, f]),
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// All weights zero, norms at identity.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        Self::build(config, |i, o| ConvBn::zeros(i, o, 3, 1, 1), ResidualBlock::zeros)
    }

    /// Kaiming-uniform convs, uniform `+-1/sqrt(fan_in)` head weights, zero
    /// head bias. Draws from the `"init"` stream of `master_seed`.
    pub fn init(config: &NetworkConfig, master_seed: u64) -> Result<Self> {
        let mut rng = seed::rng(master_seed, "init");
        let stem = ConvBn::init(config.in_channels, config.stem_channels, 3, 1, 1, &mut rng);
        let mut net = Self::build(config, |_, _| stem.clone(), |s| ResidualBlock::init(s, &mut rng))?;
        let bound = 1.0 / (config.feature_channels() as f64).sqrt();
        net.head_weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = T::of(rng.random_range(-bound..bound)));
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn block_prefixes(&self) -> Vec<String> {
        let mut counters = vec![0usize; self.config.stage_blocks.len()];
        self.config
            .block_specs()
            .iter()
            .map(|(stage, _)| {
                let b = counters[*stage];
                counters[*stage] += 1;
                format!("layer{}.{b}.", stage + 1)
            })
            .collect()
    }

    /// Every named tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &Tensor<T>)> {
        let mut out = Vec::new();
        fn push<'a, T>(names: [String; 5], u: &'a ConvBn<T>, out: &mut Vec<(String, TensorKind, &'a Tensor<T>)>) {
            let ts = [&u.kernel, &u.bn.scale, &u.bn.shift, &u.bn.running_mean, &u.bn.running_var];
            for ((n, k), t) in names.into_iter().zip(KINDS).zip(ts) {
                out.push((n, k, t));
            }
        }
        push(conv_bn_names("stem.", "conv", "bn"), &self.stem, &mut out);
        for (prefix, block) in self.block_prefixes().iter().zip(&self.blocks) {
            for (j, u) in block.units.iter().enumerate() {
                push(conv_bn_names(prefix, &format!("conv{}", j + 1), &format!("bn{}", j + 1)), u, &mut out);
            }
            if let Some(p) = &block.projection {
                push(conv_bn_names(prefix, "proj.conv", "proj.bn"), p, &mut out);
            }
        }
        out.push(("head.weight".into(), TensorKind::Param, &self.head_weight));
        out.push(("head.bias".into(), TensorKind::Param, &self.head_bias));
        out
    }

    /// Mutable view in the same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut Tensor<T>)> {
        let prefixes = self.block_prefixes();
        let mut out = Vec::new();
        fn push<'a, T>(names: [String; 5], u: &'a mut ConvBn<T>, out: &mut Vec<(String, TensorKind, &'a mut Tensor<T>)>) {
            let ts = [
                &mut u.kernel,
                &mut u.bn.scale,
                &mut u.bn.shift,
                &mut u.bn.running_mean,
                &mut u.bn.running_var,
            ];
            for ((n, k), t) in names.into_iter().zip(KINDS).zip(ts) {
                out.push((n, k, t));
            }
        }
        push(conv_bn_names("stem.", "conv", "bn"), &mut self.stem, &mut out);
        for (prefix, block) in prefixes.iter().zip(&mut self.blocks) {
            for (j, u) in block.units.iter_mut().enumerate() {
                push(conv_bn_names(prefix, &format!("conv{}", j + 1), &format!("bn{}", j + 1)), u, &mut out);
            }
            if let Some(p) = &mut block.projection {
                push(conv_bn_names(prefix, "proj.conv", "proj.bn"), p, &mut out);
            }
        }
        out.push(("head.weight".into(), TensorKind::Param, &mut self.head_weight));
        out.push(("head.bias".into(), TensorKind::Param, &mut self.head_bias));
        out
    }

    fn collect(&self, kind: TensorKind) -> Parameters<T> {
        self.tensors()
            .into_iter()
            .filter(|(_, k, _)| *k == kind)
            .map(|(n, _, t)| (n, t.clone()))
            .collect()
    }

    /// Copies of the trainable tensors.
    pub fn parameters(&self) -> Parameters<T> {
        self.collect(TensorKind::Param)
    }

    pub fn buffers(&self) -> Parameters<T> {
        self.collect(TensorKind::Buffer)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, k, _)| *k == TensorKind::Param)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Fresh optimizer state with zero velocity for every parameter.
    pub fn optimizer(&self, lr: f64, momentum: f64) -> Result<OptimizerState<T>> {
        OptimizerState::new(lr, momentum, &self.parameters())
    }

    pub fn sgd_step(&mut self, grads: &Parameters<T>, state: &mut OptimizerState<T>) -> Result<()> {
        let params = self
            .tensors_mut()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Param)
            .map(|(n, _, t)| (n, t));
        step_named(params, grads, state)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {s}, {s}] input, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NetworkCache<T>)> {
        self.forward_mode(x, Mode::Train)
    }

    fn forward_mode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NetworkCache<T>)> {
        self.check_input(x)?;
        let (z, stem_bn) = self.stem.forward(x, mode)?;
        let stem_out = relu_forward(&z);
        let mut h = stem_out.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, c) = residual_block_forward(&h, block, mode)?;
            caches.push(c);
            h = y;
        }
        let features = global_avg_pool_forward(&h)?;
        let logits = linear_forward(&features, &self.head_weight, &self.head_bias)?;
        Ok((
            logits,
            NetworkCache {
                input: x.clone(),
                stem_bn,
                stem_out,
                blocks: caches,
                pool_shape: h.shape().to_vec(),
                features,
            },
        ))
    }

    /// Eval-mode logits (`N x num_classes`); running statistics are used
    /// and nothing is mutated.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.clone().forward_mode(x, Mode::Eval)?.0)
    }

    /// Eval-mode class probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(&self.forward(x)?)
    }

    /// Parameter gradients given `d loss / d logits`.
    pub fn backward(&self, cache: &NetworkCache<T>, grad_logits: &Tensor<T>) -> Result<Parameters<T>> {
        let (g_feat, g_w, g_b) = linear_backward(&cache.features, &self.head_weight, grad_logits)?;
        let mut g = global_avg_pool_backward(&cache.pool_shape, &g_feat)?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (gx, bg) = residual_block_backward(block, bc, &g)?;
            block_grads.push(bg);
            g = gx;
        }
        block_grads.reverse();
        let g = relu_backward(&cache.stem_out, &g)?;
        let (_, stem) = self.stem.backward(&cache.input, &cache.stem_bn, &g)?;

        let mut out = BTreeMap::new();
        let mut put = |names: [String; 5], gr: ConvBnGrads<T>| {
            let [k, s, b, _, _] = names;
            out.insert(k, gr.kernel);
            out.insert(s, gr.scale);
            out.insert(b, gr.shift);
        };
        put(conv_bn_names("stem.", "conv", "bn"), stem);
        for (prefix, bg) in self.block_prefixes().iter().zip(block_grads) {
            for (j, ug) in bg.units.into_iter().enumerate() {
                put(conv_bn_names(prefix, &format!("conv{}", j + 1), &format!("bn{}", j + 1)), ug);
            }
            if let Some(pg) = bg.projection {
                put(conv_bn_names(prefix, "proj.conv", "proj.bn"), pg);
            }
        }
        out.insert("head.weight".into(), g_w);
        out.insert("head.bias".into(), g_b);
        Ok(out)
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::zeros(&self.config).expect("config already validated");
        for ((_, _, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_scalar, random_tensor};
    use crate::nn::loss::cross_entropy;
    use crate::par;

    #[test]
    fn default_layout() {
        let cfg = NetworkConfig::default();
        let specs = cfg.block_specs();
        assert_eq!(specs.len(), 6);
        assert!(!specs[0].1.downsample && specs[2].1.downsample && specs[4].1.downsample);
        assert_eq!(cfg.feature_channels(), 64);
        let net = Network::<f32>::init(&cfg, 1).unwrap();
        let names: Vec<_> = net.tensors().into_iter().map(|(n, _, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"layer2.0.proj.conv.weight".to_string()));
        let rn = NetworkConfig::resnet50(64);
        assert_eq!(rn.block_specs().len(), 16);
        assert_eq!(rn.feature_channels(), 2048);
        rn.validate().unwrap();
    }

    #[test]
    fn config_problems_are_collected() {
        let cfg = NetworkConfig {
            stage_blocks: vec![1, 0],
            stage_channels: vec![8],
            num_classes: 5,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
    }

    #[test]
    fn zero_weights_output_head_bias() {
        let cfg = NetworkConfig::tiny();
        let mut net = Network::<f32>::zeros(&cfg).unwrap();
        let bias: Vec<f32> = (0..10).map(|i| i as f32 * 0.5 - 2.0).collect();
        net.head_bias = Tensor::new(vec![10], bias.clone()).unwrap();
        let mut rng = seed::rng(15, "net-bias");
        let x = random_tensor(&[3, 3, 8, 8], &mut rng).cast::<f32>();
        let logits = net.forward(&x).unwrap();
        for row in logits.data().chunks(10) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let net = Network::<f32>::init(&NetworkConfig::tiny(), 2).unwrap();
        let mut rng = seed::rng(16, "net-same");
        let one = random_tensor(&[1, 3, 8, 8], &mut rng).cast::<f32>();
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let x = Tensor::new(vec![2, 3, 8, 8], data).unwrap();
        let logits = net.forward(&x).unwrap();
        assert_eq!(&logits.data()[..10], &logits.data()[10..]);
        assert!(net.forward(&Tensor::zeros(&[1, 3, 9, 9])).is_err());
    }

    #[test]
    fn sampled_parameter_gradients_match_finite_differences() {
        let cfg = NetworkConfig::tiny();
        let net = Network::<f64>::init(&cfg, 3).unwrap();
        let mut rng = seed::rng(17, "net-fd");
        let x = random_tensor(&[4, 3, 8, 8], &mut rng);
        let targets = [1, 7, 3, 3];
        let loss = |n: &Network<f64>| -> f64 {
            let (logits, _) = n.clone().forward_train(&x).unwrap();
            cross_entropy(&logits, &targets).unwrap().0
        };
        let (logits, cache) = net.clone().forward_train(&x).unwrap();
        let (_, gl) = cross_entropy(&logits, &targets).unwrap();
        let grads = net.backward(&cache, &gl).unwrap();
        assert_eq!(grads.len(), net.parameters().len());

        let names: Vec<String> = grads.keys().cloned().collect();
        for _ in 0..20 {
            let name = &names[rng.random_range(0..names.len())];
            let idx = rng.random_range(0..grads[name].len());
            let nudge = |d: f64| {
                let mut n = net.clone();
                for (nm, _, t) in n.tensors_mut() {
                    if &nm == name {
                        t.data_mut()[idx] += d;
                    }
                }
                loss(&n)
            };
            if let Err(msg) = check_scalar(grads[name].data()[idx], nudge, 1e-2) {
                panic!("{name}[{idx}]: {msg}");
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_training_math() {
        let cfg = NetworkConfig {
            input_size: 16,
            ..NetworkConfig::tiny()
        };
        let net = Network::<f32>::init(&cfg, 4).unwrap();
        let mut rng = seed::rng(18, "net-threads");
        let x = random_tensor(&[6, 3, 16, 16], &mut rng).cast::<f32>();
        let run = || {
            let mut n = net.clone();
            let (logits, cache) = n.forward_train(&x).unwrap();
            let (_, gl) = cross_entropy(&logits, &[0, 1, 2, 3, 4, 5]).unwrap();
            (logits, n.backward(&cache, &gl).unwrap())
        };
        assert_eq!(par::with_threads(1, run), par::with_threads(3, run));
    }

    #[test]
    fn lr_zero_step_keeps_parameters() {
        let mut net = Network::<f32>::init(&NetworkConfig::tiny(), 5).unwrap();
        let before = net.parameters();
        let mut st = net.optimizer(0.0, 0.9).unwrap();
        let grads: Parameters<f32> = before.iter().map(|(k, v)| (k.clone(), Tensor::full(v.shape(), 1.0))).collect();
        net.sgd_step(&grads, &mut st).unwrap();
        assert_eq!(net.parameters(), before);
    }
}
