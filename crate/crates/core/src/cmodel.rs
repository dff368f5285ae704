//! The segmentation network, its real-valued counterpart, Adam, and checkpoints.
//!
//! Topology: a 7-layer strided convolutional stem (conv + BN + ReLU each),
//! residual stages of basic blocks (the first block of every stage after the
//! first downsamples with a 1-wide projection shortcut), average pooling to a
//! fixed length, one dense layer producing a value per frequency bin, and a
//! split sigmoid.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clayers::{
    adaptive_window, cavgpool, cavgpool_backward, cbatchnorm_backward, cbatchnorm_forward, cconv1d_backward,
    cconv1d_forward, clinear_backward, clinear_forward, crelu, crelu_backward, csigmoid, csigmoid_backward,
    BatchStats, BnMode, BnParams, ConvParams, Cov2, LinearParams, WirtingerGrad,
};
use crate::ctensor::{ComplexTensor, Precision, Real, SpectrumFrame};
use crate::error::{Error, Result};
use crate::objectives::PredictedSpectrum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Complex parameters; consumes the complex spectrum.
    Complex,
    /// Real parameters; consumes the magnitude spectrum.
    Real,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Complex => "complex",
            Mode::Real => "real",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        Self { kernel, stride, channels }
    }
}

pub const STEM_LAYERS: usize = 7;

pub const DEFAULT_STEM: [ConvSpec; STEM_LAYERS] = [
    ConvSpec::new(7, 2, 16),
    ConvSpec::new(3, 1, 16),
    ConvSpec::new(3, 2, 32),
    ConvSpec::new(3, 1, 32),
    ConvSpec::new(3, 2, 64),
    ConvSpec::new(3, 1, 64),
    ConvSpec::new(3, 2, 64),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_bins: usize,
    pub mode: Mode,
    pub stem: Vec<ConvSpec>,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub head_pool_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture for `input_bins` frequency bins. The pooled head
    /// length is 16 positions, or the whole final feature map when shorter.
    pub fn new(input_bins: usize, mode: Mode) -> Self {
        let mut cfg = Self {
            input_bins,
            mode,
            stem: DEFAULT_STEM.to_vec(),
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            head_pool_len: 16,
            seed: 0,
        };
        if let Ok(len) = cfg.final_len() {
            cfg.head_pool_len = len.min(16);
        }
        cfg
    }

    /// Reduced widths for fast tests: stem `[4,4,8,8,8,8,8]`, stages `[8,16,16,16]`.
    pub fn miniature(input_bins: usize, mode: Mode) -> Self {
        let widths = [4, 4, 8, 8, 8, 8, 8];
        let stem = DEFAULT_STEM.iter().zip(widths).map(|(s, c)| ConvSpec { channels: c, ..*s }).collect();
        let mut cfg = Self { stem, stage_channels: vec![8, 16, 16, 16], ..Self::new(input_bins, mode) };
        cfg.head_pool_len = cfg.final_len().map(|l| l.min(16)).unwrap_or(1);
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn downsampling(&self) -> usize {
        let stem: usize = self.stem.iter().map(|s| s.stride).product();
        stem << self.stage_channels.len().saturating_sub(1)
    }

    /// Length of the feature map entering the pooled head.
    pub fn final_len(&self) -> Result<usize> {
        let d = self.downsampling();
        if d == 0 || self.input_bins % d != 0 {
            return Err(Error::ConfigInvalid(format!("downsampling {d} does not divide {} bins", self.input_bins)));
        }
        Ok(self.input_bins / d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.input_bins < 256 || !self.input_bins.is_power_of_two() {
            return bad(format!("input_bins {} must be a power of two >= 256", self.input_bins));
        }
        if self.stem.len() != STEM_LAYERS {
            return bad(format!("stem needs {STEM_LAYERS} layers, got {}", self.stem.len()));
        }
        if self.stem.iter().any(|s| s.kernel == 0 || s.kernel % 2 == 0 || s.stride == 0 || s.channels == 0) {
            return bad("stem kernels must be odd and strides/channels positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return bad("need at least one stage with positive channels and blocks".into());
        }
        let len = self.final_len()?;
        if self.head_pool_len == 0 || len % self.head_pool_len != 0 {
            return bad(format!("head_pool_len {} must divide final length {len}", self.head_pool_len));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct ConvBn<T> {
    conv: ConvParams<T>,
    bn: BnParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    first: ConvBn<T>,
    second: ConvBn<T>,
    /// 1-wide strided projection; `None` for an identity shortcut.
    shortcut: Option<ConvBn<T>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer<T> {
    /// conv + BN + ReLU
    Stem(ConvBn<T>),
    Block(Block<T>),
    Head { pool_window: usize, linear: LinearParams<T> },
}

#[derive(Debug)]
struct ConvBnCache<T> {
    input: ComplexTensor<T>,
    conv_out: ComplexTensor<T>,
}

#[derive(Debug)]
enum Cache<T> {
    Stem { cb: ConvBnCache<T>, bn_out: ComplexTensor<T> },
    Block { first: ConvBnCache<T>, bn1_out: ComplexTensor<T>, second: ConvBnCache<T>, shortcut: Option<ConvBnCache<T>>, sum: ComplexTensor<T> },
    Head { features: ComplexTensor<T>, pooled_shape: Vec<usize>, logits: ComplexTensor<T> },
}

/// Activations saved by a training forward pass, consumed by [`Model::backward`].
#[derive(Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    stats: Vec<BatchStats<T>>,
}

fn init_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, mode: Mode) -> ComplexTensor<T> {
    let n: usize = shape.iter().product();
    let var = match mode {
        Mode::Complex => 1.0 / (2.0 * fan_in as f64),
        Mode::Real => 1.0 / fan_in as f64,
    };
    let normal = Normal::new(0.0, var.sqrt()).expect("finite variance");
    let mut draw = || (0..n).map(|_| T::c(normal.sample(rng))).collect::<Vec<T>>();
    match mode {
        Mode::Complex => {
            let re = draw();
            let im = draw();
            ComplexTensor::new(shape, re, im).unwrap()
        }
        Mode::Real => ComplexTensor::from_real(shape, draw()).unwrap(),
    }
}

fn zeros<T: Real>(shape: Vec<usize>, mode: Mode) -> ComplexTensor<T> {
    match mode {
        Mode::Complex => ComplexTensor::zeros(shape),
        Mode::Real => ComplexTensor::real_zeros(shape),
    }
}

fn conv_bn<T: Real>(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: usize, stride: usize, mode: Mode) -> ConvBn<T> {
    let weight = init_tensor(rng, vec![cout, cin, kernel], cin * kernel, mode);
    let conv = ConvParams::new(weight, zeros(vec![cout], mode), stride, kernel / 2).expect("valid conv");
    let bn = match mode {
        Mode::Complex => BnParams::complex(cout),
        Mode::Real => BnParams::real(cout),
    };
    ConvBn { conv, bn }
}

impl<T: Real> ConvBn<T> {
    fn forward(&self, x: &ComplexTensor<T>, mode: BnMode, stats: &mut Vec<BatchStats<T>>) -> Result<(ComplexTensor<T>, ComplexTensor<T>)> {
        let c = cconv1d_forward(x, &self.conv)?;
        let (b, s) = cbatchnorm_forward(&c, &self.bn, mode)?;
        stats.extend(s);
        Ok((c, b))
    }

    /// Returns (input grad, [conv w, conv b, bn gamma, bn beta]).
    fn backward(&self, cache: &ConvBnCache<T>, up: &ComplexTensor<T>) -> Result<(ComplexTensor<T>, [WirtingerGrad<T>; 4])> {
        let (d_conv, g_bn) = cbatchnorm_backward(&cache.conv_out, &self.bn, up)?;
        let (d_in, g_conv) = cconv1d_backward(&cache.input, &self.conv, &d_conv)?;
        Ok((d_in, [g_conv.weight, g_conv.bias, g_bn.gamma, g_bn.beta]))
    }

    fn params(&self) -> [&ComplexTensor<T>; 4] {
        [&self.conv.weight, &self.conv.bias, &self.bn.gamma, &self.bn.beta]
    }

    fn params_mut(&mut self) -> [&mut ComplexTensor<T>; 4] {
        [&mut self.conv.weight, &mut self.conv.bias, &mut self.bn.gamma, &mut self.bn.beta]
    }
}

impl<T: Real> Layer<T> {
    fn param_count(&self) -> usize {
        match self {
            Layer::Stem(_) => 4,
            Layer::Block(b) => 8 + if b.shortcut.is_some() { 4 } else { 0 },
            Layer::Head { .. } => 2,
        }
    }

    fn bns(&self) -> Vec<&BnParams<T>> {
        match self {
            Layer::Stem(cb) => vec![&cb.bn],
            Layer::Block(b) => {
                let mut v = vec![&b.first.bn, &b.second.bn];
                v.extend(b.shortcut.as_ref().map(|s| &s.bn));
                v
            }
            Layer::Head { .. } => vec![],
        }
    }

    fn bns_mut(&mut self) -> Vec<&mut BnParams<T>> {
        match self {
            Layer::Stem(cb) => vec![&mut cb.bn],
            Layer::Block(b) => {
                let mut v = vec![&mut b.first.bn, &mut b.second.bn];
                v.extend(b.shortcut.as_mut().map(|s| &mut s.bn));
                v
            }
            Layer::Head { .. } => vec![],
        }
    }

    fn params(&self) -> Vec<&ComplexTensor<T>> {
        match self {
            Layer::Stem(cb) => cb.params().to_vec(),
            Layer::Block(b) => {
                let mut v = b.first.params().to_vec();
                v.extend(b.second.params());
                if let Some(s) = &b.shortcut {
                    v.extend(s.params());
                }
                v
            }
            Layer::Head { linear, .. } => vec![&linear.weight, &linear.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ComplexTensor<T>> {
        match self {
            Layer::Stem(cb) => cb.params_mut().into_iter().collect(),
            Layer::Block(b) => {
                let mut v: Vec<_> = b.first.params_mut().into_iter().collect();
                v.extend(b.second.params_mut());
                if let Some(s) = &mut b.shortcut {
                    v.extend(s.params_mut());
                }
                v
            }
            Layer::Head { linear, .. } => vec![&mut linear.weight, &mut linear.bias],
        }
    }

    fn forward(&self, x: ComplexTensor<T>, mode: BnMode, stats: &mut Vec<BatchStats<T>>) -> Result<(ComplexTensor<T>, Cache<T>)> {
        match self {
            Layer::Stem(cb) => {
                let (c, b) = cb.forward(&x, mode, stats)?;
                let out = crelu(&b);
                Ok((out, Cache::Stem { cb: ConvBnCache { input: x, conv_out: c }, bn_out: b }))
            }
            Layer::Block(blk) => {
                let (c1, b1) = blk.first.forward(&x, mode, stats)?;
                let r1 = crelu(&b1);
                let (c2, b2) = blk.second.forward(&r1, mode, stats)?;
                let (short, sc_cache) = match &blk.shortcut {
                    Some(s) => {
                        let (sc, sb) = s.forward(&x, mode, stats)?;
                        (sb, Some(sc))
                    }
                    None => (x.clone(), None),
                };
                let sum = b2.add(&short)?;
                let out = crelu(&sum);
                let shortcut = sc_cache.map(|conv_out| ConvBnCache { input: x.clone(), conv_out });
                Ok((
                    out,
                    Cache::Block {
                        first: ConvBnCache { input: x, conv_out: c1 },
                        bn1_out: b1,
                        second: ConvBnCache { input: r1, conv_out: c2 },
                        shortcut,
                        sum,
                    },
                ))
            }
            Layer::Head { pool_window, linear } => {
                let pooled = cavgpool(&x, *pool_window)?;
                let pooled_shape = pooled.shape().to_vec();
                let b = pooled_shape[0];
                let flat = pooled.reshape(vec![b, pooled_shape[1] * pooled_shape[2]])?;
                let logits = clinear_forward(&flat, linear)?;
                let out = csigmoid(&logits);
                Ok((out, Cache::Head { features: x, pooled_shape, logits }))
            }
        }
    }

    fn backward(&self, cache: &Cache<T>, up: &ComplexTensor<T>) -> Result<(ComplexTensor<T>, Vec<WirtingerGrad<T>>)> {
        match (self, cache) {
            (Layer::Stem(cb), Cache::Stem { cb: c, bn_out }) => {
                let d_bn = crelu_backward(bn_out, up)?;
                let (d_in, g) = cb.backward(c, &d_bn)?;
                Ok((d_in, g.into_iter().collect()))
            }
            (Layer::Block(blk), Cache::Block { first, bn1_out, second, shortcut, sum }) => {
                let d_sum = crelu_backward(sum, up)?;
                let (d_r1, g2) = blk.second.backward(second, &d_sum)?;
                let d_b1 = crelu_backward(bn1_out, &d_r1)?;
                let (mut d_x, g1) = blk.first.backward(first, &d_b1)?;
                let mut grads: Vec<_> = g1.into_iter().chain(g2).collect();
                match (&blk.shortcut, shortcut) {
                    (Some(s), Some(sc)) => {
                        let (d_xs, gs) = s.backward(sc, &d_sum)?;
                        d_x = d_x.add(&d_xs)?;
                        grads.extend(gs);
                    }
                    _ => d_x = d_x.add(&d_sum)?,
                }
                Ok((d_x, grads))
            }
            (Layer::Head { pool_window, linear }, Cache::Head { features, pooled_shape, logits }) => {
                let d_logits = csigmoid_backward(logits, up)?;
                let b = pooled_shape[0];
                let pooled = cavgpool(features, *pool_window)?.reshape(vec![b, pooled_shape[1] * pooled_shape[2]])?;
                let (d_flat, g) = clinear_backward(&pooled, linear, &d_logits)?;
                let d_pooled = d_flat.reshape(pooled_shape.clone())?;
                let d_feat = cavgpool_backward(features, *pool_window, &d_pooled)?;
                Ok((d_feat, vec![g.weight, g.bias]))
            }
            _ => Err(Error::shape("tape does not match layer")),
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mode = config.mode;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        let mut ch = 1;
        for s in &config.stem {
            layers.push(Layer::Stem(conv_bn(&mut rng, ch, s.channels, s.kernel, s.stride, mode)));
            ch = s.channels;
        }
        for (stage, &width) in config.stage_channels.iter().enumerate() {
            for block in 0..config.blocks_per_stage {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let first = conv_bn(&mut rng, ch, width, 3, stride, mode);
                let second = conv_bn(&mut rng, width, width, 3, 1, mode);
                let shortcut = (stride != 1 || ch != width).then(|| conv_bn(&mut rng, ch, width, 1, stride, mode));
                layers.push(Layer::Block(Block { first, second, shortcut }));
                ch = width;
            }
        }
        let final_len = config.final_len()?;
        let pool_window = adaptive_window(final_len, config.head_pool_len)?;
        let fan_in = ch * config.head_pool_len;
        let weight = init_tensor(&mut rng, vec![config.input_bins, fan_in], fan_in, mode);
        let linear = LinearParams::new(weight, zeros(vec![config.input_bins], mode))?;
        layers.push(Layer::Head { pool_window, linear });
        Ok(Self { config: config.clone(), layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn input_bins(&self) -> usize {
        self.config.input_bins
    }

    /// Parameters in a fixed order: layer by layer, conv weight/bias then BN
    /// gamma/beta, shortcut last within a block, dense weight/bias at the end.
    pub fn params(&self) -> Vec<&ComplexTensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Mutable parameters, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut ComplexTensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Number of real scalars across all trainable parameters.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len() * if p.is_real() { 1 } else { 2 }).sum()
    }

    /// Per-layer summary used to compare topologies: (kind, kernel, stride, channels).
    pub fn topology(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Stem(cb) => out.push(("stem", cb.conv.kernel(), cb.conv.stride, cb.conv.out_channels())),
                Layer::Block(b) => {
                    out.push(("conv", b.first.conv.kernel(), b.first.conv.stride, b.first.conv.out_channels()));
                    out.push(("conv", b.second.conv.kernel(), b.second.conv.stride, b.second.conv.out_channels()));
                    if let Some(s) = &b.shortcut {
                        out.push(("shortcut", s.conv.kernel(), s.conv.stride, s.conv.out_channels()));
                    }
                }
                Layer::Head { pool_window, linear } => out.push(("head", *pool_window, 1, linear.out_features())),
            }
        }
        out
    }

    /// Network input for a batch: the centered complex spectrum, or its
    /// magnitude for a real model, scaled by `1/sqrt(L)`.
    pub fn input_tensor(&self, frames: &[&SpectrumFrame<T>]) -> Result<ComplexTensor<T>> {
        let l = self.input_bins();
        let scale = T::one() / T::c(l as f64).sqrt();
        let mut re = Vec::with_capacity(frames.len() * l);
        let mut im = Vec::with_capacity(frames.len() * l);
        for f in frames {
            if f.len() != l {
                return Err(Error::shape(format!("frame of {} bins, model expects {l}", f.len())));
            }
            for z in f.centered() {
                match self.mode() {
                    Mode::Complex => {
                        re.push(z.re * scale);
                        im.push(z.im * scale);
                    }
                    Mode::Real => re.push(z.norm() * scale),
                }
            }
        }
        let shape = vec![frames.len(), 1, l];
        match self.mode() {
            Mode::Complex => ComplexTensor::new(shape, re, im),
            Mode::Real => ComplexTensor::from_real(shape, re),
        }
    }

    /// Forward pass recording what the backward pass needs. `BnMode::Train`
    /// normalizes with batch statistics (kept on the tape, see [`Model::absorb`]).
    pub fn forward_tape(&self, input: &ComplexTensor<T>, mode: BnMode) -> Result<(ComplexTensor<T>, Tape<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let mut x = input.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(x, mode, &mut stats)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, Tape { caches, stats }))
    }

    /// Inference-only forward pass (eval-mode batch norm).
    pub fn forward(&self, input: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let mut stats = Vec::new();
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(x, BnMode::Eval, &mut stats)?.0;
        }
        Ok(x)
    }

    pub fn predict(&self, frames: &[&SpectrumFrame<T>]) -> Result<Vec<PredictedSpectrum<T>>> {
        let out = self.forward(&self.input_tensor(frames)?)?;
        Ok(split_predictions(&out, self.input_bins()))
    }

    /// Gradients of every parameter given dL/d(output), in [`Model::params`] order.
    pub fn backward(&self, tape: &Tape<T>, upstream: &ComplexTensor<T>) -> Result<Vec<WirtingerGrad<T>>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::shape("tape length does not match model"));
        }
        let total: usize = self.layers.iter().map(|l| l.param_count()).sum();
        let mut grads: Vec<Option<WirtingerGrad<T>>> = vec![None; total];
        let mut end = total;
        let mut d = upstream.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let (d_in, g) = layer.backward(cache, &d)?;
            let start = end - layer.param_count();
            for (slot, g) in grads[start..end].iter_mut().zip(g) {
                *slot = Some(g);
            }
            end = start;
            d = d_in;
        }
        grads.into_iter().map(|g| g.ok_or_else(|| Error::shape("missing gradient"))).collect()
    }

    /// Fold the batch statistics of a training pass into the running averages.
    pub fn absorb(&mut self, tape: &Tape<T>) {
        let mut stats = tape.stats.iter();
        for layer in &mut self.layers {
            for bn in layer.bns_mut() {
                if let Some(s) = stats.next() {
                    bn.absorb(s);
                }
            }
        }
    }

    fn bns(&self) -> Vec<&BnParams<T>> {
        self.layers.iter().flat_map(|l| l.bns()).collect()
    }

    fn bns_mut(&mut self) -> Vec<&mut BnParams<T>> {
        self.layers.iter_mut().flat_map(|l| l.bns_mut()).collect()
    }
}

/// Splits a `[batch, L]` sigmoid output into per-sample predictions.
pub fn split_predictions<T: Real>(out: &ComplexTensor<T>, bins: usize) -> Vec<PredictedSpectrum<T>> {
    let batch = out.len() / bins;
    (0..batch)
        .map(|b| {
            let p_x = out.re()[b * bins..(b + 1) * bins].to_vec();
            match out.im() {
                Some(im) => PredictedSpectrum { p_x, p_y: im[b * bins..(b + 1) * bins].to_vec() },
                None => PredictedSpectrum::real(p_x),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments held separately for the real and imaginary part of each parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<WirtingerGrad<T>>,
    pub v: Vec<WirtingerGrad<T>>,
    pub step: u64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &Model<T>, learning_rate: f64) -> Self {
        let zeros: Vec<_> = model.params().iter().map(|p| WirtingerGrad::zeros_like(p)).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, learning_rate, adam: AdamConfig::default() }
    }
}

fn adam_update<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], lr_t: T, b1: T, b2: T, eps: T) {
    let one = T::one();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
    }
}

/// One Adam step applied independently to every real and imaginary part.
pub fn step<T: Real>(model: &mut Model<T>, grads: &[WirtingerGrad<T>], opt: &mut OptimizerState<T>) -> Result<()> {
    let params = model.params_mut();
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape != g.shape || g.d_y.is_some() == p.is_real() {
            return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape, p.shape)));
        }
    }
    opt.step += 1;
    let t = opt.step as f64;
    let a = &opt.adam;
    // bias correction folded into the step size; eps scaled to match the
    // textbook form m_hat / (sqrt(v_hat) + eps)
    let bc1 = 1.0 - a.beta1.powf(t);
    let bc2 = 1.0 - a.beta2.powf(t);
    let lr_t = T::c(opt.learning_rate * bc2.sqrt() / bc1);
    let eps = T::c(a.eps * bc2.sqrt());
    let (b1, b2) = (T::c(a.beta1), T::c(a.beta2));
    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        adam_update(&mut p.re, &g.d_x, &mut opt.m[i].d_x, &mut opt.v[i].d_x, lr_t, b1, b2, eps);
        if let (Some(im), Some(gy), Some(my), Some(vy)) = (p.im.as_mut(), g.d_y.as_ref(), opt.m[i].d_y.as_mut(), opt.v[i].d_y.as_mut()) {
            adam_update(im, gy, my, vy, lr_t, b1, b2, eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CMSN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub mode: Mode,
    pub precision: Precision,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: serde_json::Value,
    /// Scalars in the blob: parameters then batch-norm running statistics.
    pub value_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub epoch: usize,
    pub metrics: serde_json::Value,
}

impl<T: Real> Model<T> {
    fn blob_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend_from_slice(p.re());
            if let Some(im) = p.im() {
                out.extend_from_slice(im);
            }
        }
        for bn in self.bns() {
            out.extend_from_slice(bn.running_mean.re());
            if let Some(im) = bn.running_mean.im() {
                out.extend_from_slice(im);
            }
            for c in &bn.running_cov {
                out.extend([c.xx, c.xy, c.yy]);
            }
        }
        out
    }

    fn load_blob_values(&mut self, values: &[T]) -> Result<()> {
        let mut it = values.iter().copied();
        let mut fill = |dst: &mut [T]| -> Result<()> {
            for d in dst.iter_mut() {
                *d = it.next().ok_or_else(|| Error::CorruptBlob("blob shorter than model".into()))?;
            }
            Ok(())
        };
        for p in self.params_mut() {
            fill(&mut p.re)?;
            if let Some(im) = p.im.as_mut() {
                fill(im)?;
            }
        }
        for bn in self.bns_mut() {
            fill(&mut bn.running_mean.re)?;
            if let Some(im) = bn.running_mean.im.as_mut() {
                fill(im)?;
            }
            for c in &mut bn.running_cov {
                let mut v = [T::zero(); 3];
                fill(&mut v)?;
                *c = Cov2 { xx: v[0], xy: v[1], yy: v[2] };
            }
        }
        Ok(())
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, epoch: usize, metrics: serde_json::Value) -> Self {
        Self { model, epoch, metrics }
    }

    /// `magic | u32 header length | JSON header | LE blob | CRC32 of all preceding bytes`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let values = self.model.blob_values();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            mode: self.model.mode(),
            precision: T::PRECISION,
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            value_count: values.len(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + header.len() + values.len() * T::PRECISION.width());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in values {
            v.write_le(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn header_from_bytes(bytes: &[u8]) -> Result<CheckpointHeader> {
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::FormatVersionMismatch("not a checkpoint (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(9..9 + hlen).ok_or_else(|| Error::CorruptBlob("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::CorruptBlob(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersionMismatch(format!("checkpoint version {}", header.format_version)));
        }
        Ok(header)
    }

    /// Parses a checkpoint; `expected_mode` rejects a model of the other kind.
    pub fn from_bytes(bytes: &[u8], expected_mode: Option<Mode>) -> Result<Self> {
        let header = Self::header_from_bytes(bytes)?;
        if header.precision != T::PRECISION {
            return Err(Error::FormatVersionMismatch(format!("checkpoint precision {:?}, expected {:?}", header.precision, T::PRECISION)));
        }
        if let Some(m) = expected_mode {
            if m != header.mode {
                return Err(Error::ModeMismatch { expected: m.to_string(), found: header.mode.to_string() });
            }
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let width = T::PRECISION.width();
        let blob_start = 9 + hlen;
        let expected_len = blob_start + header.value_count * width + 4;
        if bytes.len() != expected_len {
            return Err(Error::CorruptBlob(format!("file is {} bytes, header implies {expected_len}", bytes.len())));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptBlob("checksum mismatch".into()));
        }
        let mut model = Model::<T>::build(&header.config)?;
        if model.blob_values().len() != header.value_count {
            return Err(Error::CorruptBlob("value count does not match architecture".into()));
        }
        let values: Vec<T> = body[blob_start..].chunks_exact(width).map(T::read_le).collect();
        model.load_blob_values(&values)?;
        Ok(Self { model, epoch: header.epoch, metrics: header.metrics })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected_mode: Option<Mode>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected_mode)
    }
}

/// Upstream gradient tensor `[batch, L]` from per-sample prediction gradients.
pub fn output_gradient<T: Real>(d_px: &[Vec<T>], d_py: Option<&[Vec<T>]>, bins: usize) -> ComplexTensor<T> {
    let re: Vec<T> = d_px.iter().flatten().copied().collect();
    let shape = vec![d_px.len(), bins];
    match d_py {
        Some(d) => ComplexTensor::new(shape, re, d.iter().flatten().copied().collect()).expect("matching shapes"),
        None => ComplexTensor::from_real(shape, re).expect("matching shapes"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::IqFrame;
    use num_complex::Complex;
    use crate::testutil::rng;
    use rand::Rng;

    fn random_spectra(n: usize, bins: usize, seed: u64) -> Vec<SpectrumFrame<f64>> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let v = (0..bins).map(|_| Complex::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect();
                crate::ctensor::fft(&IqFrame::new(v, 20e6, 0.0).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_config_shapes() {
        let cfg = ModelConfig::new(1024, Mode::Complex);
        cfg.validate().unwrap();
        assert_eq!(cfg.downsampling(), 128);
        assert_eq!(cfg.head_pool_len, 8);
        let full = ModelConfig::new(16384, Mode::Complex);
        assert_eq!(full.head_pool_len, 16);
        assert!(ModelConfig::new(128, Mode::Complex).validate().is_err());
        let mut bad = ModelConfig::new(1024, Mode::Complex);
        bad.head_pool_len = 3;
        assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        bad.head_pool_len = 8;
        bad.stem.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_in_unit_interval_and_deterministic() {
        let cfg = ModelConfig::miniature(256, Mode::Complex).with_seed(4);
        let model = Model::<f64>::build(&cfg).unwrap();
        let frames = random_spectra(3, 256, 1);
        let refs: Vec<_> = frames.iter().collect();
        let a = model.predict(&refs).unwrap();
        let b = model.predict(&refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for p in &a {
            assert_eq!(p.len(), 256);
            assert!(p.p_x.iter().chain(&p.p_y).all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn real_and_complex_share_topology() {
        let c = Model::<f32>::build(&ModelConfig::new(1024, Mode::Complex)).unwrap();
        let r = Model::<f32>::build(&ModelConfig::new(1024, Mode::Real)).unwrap();
        assert_eq!(c.topology(), r.topology());
        assert!(c.params().iter().all(|p| !p.is_real()));
        assert!(r.params().iter().all(|p| p.is_real()));
        assert_eq!(c.parameter_count(), 2 * r.parameter_count());
        let frames = random_spectra(1, 1024, 0);
        let fr: Vec<SpectrumFrame<f32>> = frames
            .iter()
            .map(|f| SpectrumFrame::from_coeffs(f.coeffs().cast::<f32>().to_vec(), f.bin_width_hz))
            .collect();
        let input = r.input_tensor(&[&fr[0]]).unwrap();
        assert!(input.is_real());
        let p = r.predict(&[&fr[0]]).unwrap();
        assert_eq!(p[0].p_x, p[0].p_y);
    }

    #[test]
    fn seeds_control_weights() {
        let cfg = ModelConfig::miniature(256, Mode::Complex);
        let a = Model::<f64>::build(&cfg.clone().with_seed(1)).unwrap();
        let b = Model::<f64>::build(&cfg.clone().with_seed(1)).unwrap();
        let c = Model::<f64>::build(&cfg.with_seed(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), c.parameter_count());
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let cfg = ModelConfig::miniature(256, Mode::Complex);
        let mut model = Model::<f64>::build(&cfg).unwrap();
        let before = model.clone();
        let zeros: Vec<_> = model.params().iter().map(|p| WirtingerGrad::zeros_like(p)).collect();
        let mut opt = OptimizerState::new(&model, 1e-3);
        step(&mut model, &zeros, &mut opt).unwrap();
        assert_eq!(model, before);
        assert_eq!(opt.step, 1);

        let ones: Vec<_> = model
            .params()
            .iter()
            .map(|p| WirtingerGrad { shape: p.shape.clone(), d_x: vec![1.0; p.len()], d_y: Some(vec![1.0; p.len()]) })
            .collect();
        let mut opt = OptimizerState::new(&model, 0.0);
        step(&mut model, &ones, &mut opt).unwrap();
        assert_eq!(model, before);
        assert!(step(&mut model, &ones[1..], &mut opt).is_err());
    }

    #[test]
    fn adam_single_step_closed_form() {
        // after one step, m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps)
        let cfg = ModelConfig::miniature(256, Mode::Complex);
        let mut model = Model::<f64>::build(&cfg).unwrap();
        let before = model.clone();
        let g: Vec<_> = model
            .params()
            .iter()
            .map(|p| WirtingerGrad { shape: p.shape.clone(), d_x: vec![0.25; p.len()], d_y: Some(vec![-2.0; p.len()]) })
            .collect();
        let mut opt = OptimizerState::new(&model, 0.01);
        step(&mut model, &g, &mut opt).unwrap();
        let (p0, q0) = (before.params()[0].get(0), model.params()[0].get(0));
        let dx = 0.01 * 0.25 / (0.25 + 1e-8);
        let dy = 0.01 * -2.0 / (2.0 + 1e-8);
        assert!((q0.re - (p0.re - dx)).abs() < 1e-15);
        assert!((q0.im - (p0.im - dy)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let cfg = ModelConfig::miniature(256, Mode::Complex).with_seed(9);
        let model = Model::<f64>::build(&cfg).unwrap();
        let ckpt = Checkpoint::new(model, 3, serde_json::json!({"val_loss": 1.5}));
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes, Some(Mode::Complex)).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 9], None), Err(Error::CorruptBlob(_))));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 20] ^= 0x40;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&flipped, None), Err(Error::CorruptBlob(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes, Some(Mode::Real)), Err(Error::ModeMismatch { .. })));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes, None), Err(Error::FormatVersionMismatch(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(b"NOTACKPT", None), Err(Error::FormatVersionMismatch(_))));
    }
}
