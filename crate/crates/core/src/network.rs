//! A small classifier built from scale-invariant convolution layers.
//!
//! Pipeline per image: bilinear upsampling, then for every conv layer
//! `[steered conv -> max over scales -> bias -> ReLU -> spatial max-pool]`,
//! then `dense -> ReLU -> ... -> dense` producing class scores.
//!
//! Backward is handwritten. Because both poolings route the gradient to a
//! single winner, only pooled winners with a positive pre-activation carry
//! gradient, so the conv backward walks those pixels only and accumulates
//! kernel-space gradients, which are then projected onto the coefficients.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::convengine::{
    max_across_scales, pad_columns, upsample, xcorr_same_acc, xcorr_same_acc_padded, xcorr_same_backprop_pixel,
    ScalePyramidResponse,
};
use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::filterbank::{check_odd, BasisSpec};
use crate::steering::{CoefficientSet, SteeredBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Kernels are steered combinations of the log-radial basis.
    Steered,
    /// Free pixel kernels at the base size and a single scale.
    Plain,
}

/// Optional rescaling of steered kernels before the cross-scale max.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleNorm {
    /// Raw steered amplitudes.
    None,
    /// Kernels at scale `s` are multiplied by `s`, which equalizes their L2
    /// norm across scales for `m = 1`.
    L2,
}

/// Metric used by SGD for steered coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    /// Raw coefficient gradients.
    None,
    /// Gradients multiplied by the inverse Gram matrix of the steered basis
    /// images (summed over scales), i.e. SGD on an orthonormalized basis.
    Gram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub channel_widths: Vec<usize>,
    pub scales: Vec<f64>,
    pub base_kernel_size: usize,
    pub spatial_pool_sizes: Vec<usize>,
    pub upsample_factor: usize,
    /// Hidden dense widths followed by the number of classes.
    pub dense_widths: Vec<usize>,
    pub basis: BasisSpec,
    pub conv_kind: ConvKind,
    pub scale_norm: ScaleNorm,
    pub preconditioner: Preconditioner,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// `n` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric_scales(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
                }
            })
            .collect(),
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_height: 28,
            input_width: 28,
            channel_widths: vec![30, 60, 90],
            scales: geometric_scales(1.0, 2.4, 5),
            base_kernel_size: 7,
            spatial_pool_sizes: vec![2, 2, 8],
            upsample_factor: 2,
            dense_widths: vec![256, 10],
            basis: BasisSpec::default(),
            conv_kind: ConvKind::Steered,
            scale_norm: ScaleNorm::None,
            preconditioner: Preconditioner::Gram,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 300,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// A narrow variant that trains in minutes on a CPU.
    pub fn desk() -> Self {
        NetworkConfig {
            channel_widths: vec![6, 12, 12],
            dense_widths: vec![64, 10],
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 16,
            ..NetworkConfig::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        *self.dense_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::invalid("input size must be positive"));
        }
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return Err(Error::invalid("channel widths must be non-empty and positive"));
        }
        if self.spatial_pool_sizes.len() != self.channel_widths.len() {
            return Err(Error::invalid(format!(
                "{} pool sizes given for {} conv layers",
                self.spatial_pool_sizes.len(),
                self.channel_widths.len()
            )));
        }
        if self.spatial_pool_sizes.contains(&0) {
            return Err(Error::invalid("pool sizes must be positive"));
        }
        if self.scales.is_empty() || self.scales.len() > u8::MAX as usize {
            return Err(Error::invalid("scale set must hold between 1 and 255 scales"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("scales must be ascending"));
        }
        check_odd(self.base_kernel_size)?;
        if self.upsample_factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        if self.dense_widths.is_empty() || self.dense_widths.contains(&0) {
            return Err(Error::invalid("dense widths must be non-empty and positive"));
        }
        self.basis.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    /// `sets[o * c_in + i]` maps input channel `i` to output channel `o`.
    Steered(Vec<CoefficientSet>),
    /// Pixel kernels in the same `(o, i)` order.
    Plain(Vec<Array2<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: ConvWeights,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
}

/// All trainable parameters. Also used to hold their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv: Vec<ConvParams>,
    pub dense: Vec<DenseParams>,
}

impl Params {
    /// Visits every real parameter in a fixed order: per conv layer the
    /// weights (real then imaginary part of each coefficient) and biases, then
    /// per dense layer the row-major weights and biases.
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for layer in &self.conv {
            match &layer.weights {
                ConvWeights::Steered(sets) => {
                    for c in sets.iter().flat_map(|s| &s.c) {
                        f(c.re);
                        f(c.im);
                    }
                }
                ConvWeights::Plain(kernels) => kernels.iter().flatten().for_each(|&v| f(v)),
            }
            layer.bias.iter().for_each(|&v| f(v));
        }
        for layer in &self.dense {
            layer.weights.iter().for_each(|&v| f(v));
            layer.bias.iter().for_each(|&v| f(v));
        }
    }

    /// Mutable counterpart of [`Params::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.conv {
            match &mut layer.weights {
                ConvWeights::Steered(sets) => {
                    for c in sets.iter_mut().flat_map(|s| &mut s.c) {
                        f(&mut c.re);
                        f(&mut c.im);
                    }
                }
                ConvWeights::Plain(kernels) => kernels.iter_mut().flatten().for_each(&mut f),
            }
            layer.bias.iter_mut().for_each(&mut f);
        }
        for layer in &mut self.dense {
            layer.weights.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each(|_| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|v| out.push(v));
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.len();
        if values.len() != n {
            return Err(Error::invalid(format!("expected {n} parameters, got {}", values.len())));
        }
        let mut it = values.iter();
        self.for_each_mut(|v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    pub fn zeros_like(&self) -> Params {
        let mut out = self.clone();
        out.for_each_mut(|v| *v = 0.0);
        out
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.is_finite());
        ok
    }

    /// Number of real parameters in conv layer `layer` (weights and biases).
    pub fn conv_param_count(&self, layer: usize) -> usize {
        let l = &self.conv[layer];
        let w = match &l.weights {
            ConvWeights::Steered(sets) => sets.iter().map(CoefficientSet::real_param_count).sum(),
            ConvWeights::Plain(k) => k.iter().map(Array2::len).sum::<usize>(),
        };
        w + l.bias.len()
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Parameters plus a stamp that changes whenever they may have changed, so
/// that caches from older forward passes are detected.
#[derive(Debug)]
pub struct NetworkState {
    params: Params,
    stamp: u64,
}

impl Clone for NetworkState {
    fn clone(&self) -> Self {
        NetworkState {
            params: self.params.clone(),
            stamp: fresh_stamp(),
        }
    }
}

impl NetworkState {
    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut Params {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pool: usize,
    ph: usize,
    pw: usize,
}

impl LayerShape {
    fn pooled_len(&self) -> usize {
        self.c_out * self.ph * self.pw
    }
}

/// Real kernels of one layer materialized at every scale.
#[derive(Debug, Clone)]
struct LayerKernels {
    sizes: Vec<usize>,
    /// Per scale, `(o * c_in + i) * size^2` row-major blocks.
    data: Vec<Vec<f64>>,
}

impl LayerKernels {
    fn kernel(&self, si: usize, pair: usize) -> &[f64] {
        let n = self.sizes[si] * self.sizes[si];
        &self.data[si][pair * n..(pair + 1) * n]
    }

    fn zeros_like(&self) -> LayerKernels {
        LayerKernels {
            sizes: self.sizes.clone(),
            data: self.data.iter().map(|d| vec![0.0; d.len()]).collect(),
        }
    }

    fn max_radius(&self) -> usize {
        self.sizes.iter().map(|s| s / 2).max().unwrap_or(0)
    }
}

/// Per-layer record of the winners chosen during the forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    /// Per pooled cell: flat pixel index of the spatial winner.
    winner: Vec<u32>,
    /// Per pooled cell: scale index that won at that pixel.
    winner_scale: Vec<u8>,
    /// Per pooled cell: whether the ReLU was open at that pixel.
    active: Vec<bool>,
}

/// Intermediates of one forward pass, tied to the state that produced them.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    layers: Vec<LayerCache>,
    dense_inputs: Vec<Vec<f64>>,
    dense_pre: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl ForwardCache {
    /// True when both passes picked the same spatial winners, winning
    /// scales and ReLU states everywhere, i.e. the network is locally linear
    /// between them.
    pub fn same_routes(&self, other: &ForwardCache) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.winner == b.winner && a.winner_scale == b.winner_scale && a.active == b.active
            })
            && self
                .dense_pre
                .iter()
                .zip(&other.dense_pre)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0)))
    }

    /// Number of pixels per conv layer that can carry gradient.
    pub fn active_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.active.iter().filter(|&&a| a).count()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Running training accuracy over the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,loss,train_acc,val_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_acc.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.step, self.loss, self.train_acc, val)
    }
}

/// Numerically stable softmax cross-entropy: returns the loss and its
/// gradient with respect to the scores.
pub fn softmax_cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (scores[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradients of one or more samples before projection onto coefficients.
struct RawGrads {
    kernels: Vec<LayerKernels>,
    conv_bias: Vec<Vec<f64>>,
    dense_w: Vec<Array2<f64>>,
    dense_b: Vec<Vec<f64>>,
}

impl RawGrads {
    fn add(&mut self, other: &RawGrads) {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
        }
        for (a, b) in self.conv_bias.iter_mut().zip(&other.conv_bias) {
            a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
        }
        for (a, b) in self.dense_w.iter_mut().zip(&other.dense_w) {
            *a += b;
        }
        for (a, b) in self.dense_b.iter_mut().zip(&other.dense_b) {
            a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
        }
    }
}

/// Samples per gradient chunk. Chunks are reduced in order, so results do
/// not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Ridge added to the Gram matrix, relative to its mean diagonal.
const GRAM_RIDGE: f64 = 1e-3;

/// Inverse of the regularized Gram matrix of the real basis images, averaged
/// over scales, row-major, in flattened coefficient order
/// `(re_0, im_0, re_1, ..)`. Averaging keeps the kernel-space step of one
/// scale independent of how many scales share the coefficients.
fn gram_inverse(banks: &[SteeredBasis]) -> Result<Vec<f64>> {
    let n = banks.first().map_or(0, |b| b.re.len());
    let d = 2 * n;
    let mut g = vec![0.0; d * d];
    for bank in banks {
        let images: Vec<&[f64]> = (0..d)
            .map(|a| if a % 2 == 0 { &bank.re[a / 2][..] } else { &bank.im_neg[a / 2][..] })
            .collect();
        for a in 0..d {
            for b in a..d {
                let dot: f64 = images[a].iter().zip(images[b]).map(|(x, y)| x * y).sum();
                g[a * d + b] += dot;
                if a != b {
                    g[b * d + a] += dot;
                }
            }
        }
    }
    for v in &mut g {
        *v /= banks.len() as f64;
    }
    let ridge = GRAM_RIDGE * (0..d).map(|a| g[a * d + a]).sum::<f64>() / d as f64;
    for a in 0..d {
        g[a * d + a] += ridge;
    }
    let chol = nalgebra::DMatrix::from_row_slice(d, d, &g)
        .cholesky()
        .ok_or_else(|| Error::Numerical("basis Gram matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok((0..d * d).map(|i| inv[(i / d, i % d)]).collect())
}

pub struct Network {
    config: NetworkConfig,
    /// One steered basis per scale (empty for plain kernels).
    banks: Vec<SteeredBasis>,
    /// Present for steered kernels with the Gram preconditioner.
    gram_inv: Option<Vec<f64>>,
    shapes: Vec<LayerShape>,
    flat_features: usize,
}

impl Network {
    /// Squared norm of all steered kernels of one coefficient set per unit
    /// coefficient variance, summed over scales. Each output is a max over
    /// the whole scale family, so the family counts as the fan-in.
    fn basis_energy(&self) -> f64 {
        if self.banks.is_empty() {
            return 1.0;
        }
        self.banks
            .iter()
            .flat_map(|bank| bank.re.iter().chain(&bank.im_neg))
            .flat_map(|img| img.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let banks = match config.conv_kind {
            ConvKind::Steered => config
                .scales
                .iter()
                .map(|&s| {
                    let gain = match config.scale_norm {
                        ScaleNorm::None => 1.0,
                        ScaleNorm::L2 => s,
                    };
                    SteeredBasis::new(&config.basis, s, config.base_kernel_size, gain)
                })
                .collect::<Result<Vec<_>>>()?,
            ConvKind::Plain => Vec::new(),
        };
        let gram_inv = match (config.conv_kind, config.preconditioner) {
            (ConvKind::Steered, Preconditioner::Gram) => Some(gram_inverse(&banks)?),
            _ => None,
        };
        let mut shapes = Vec::new();
        let (mut h, mut w) = (
            config.input_height * config.upsample_factor,
            config.input_width * config.upsample_factor,
        );
        let mut c_in = 1;
        for (&c_out, &pool) in config.channel_widths.iter().zip(&config.spatial_pool_sizes) {
            let (ph, pw) = (h.div_ceil(pool), w.div_ceil(pool));
            shapes.push(LayerShape {
                c_in,
                c_out,
                h,
                w,
                pool,
                ph,
                pw,
            });
            (h, w, c_in) = (ph, pw, c_out);
        }
        let flat_features = c_in * h * w;
        Ok(Network {
            config,
            banks,
            gram_inv,
            shapes,
            flat_features,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Length of the flattened feature vector entering the dense layers.
    pub fn flat_features(&self) -> usize {
        self.flat_features
    }

    /// Fresh parameters drawn from the configured seed. Coefficients are
    /// `N(0, 1 / (c_in * basis_len))` in both parts, plain kernels
    /// `N(0, 2 / (c_in * k^2))`, hidden dense layers `N(0, 2 / fan_in)`, the
    /// output layer `N(0, 1 / fan_in)`; biases start at zero.
    pub fn init_state(&self) -> NetworkState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let normal = |std: f64| Normal::new(0.0, std).expect("finite std");
        let k = self.config.base_kernel_size;
        let conv = self
            .shapes
            .iter()
            .map(|sh| {
                let pairs = sh.c_out * sh.c_in;
                let weights = match self.config.conv_kind {
                    ConvKind::Steered => {
                        let std = (1.0 / (sh.c_in as f64 * self.basis_energy())).sqrt();
                        ConvWeights::Steered(
                            (0..pairs)
                                .map(|_| CoefficientSet::random(&self.config.basis, std, &mut rng))
                                .collect(),
                        )
                    }
                    ConvKind::Plain => {
                        let dist = normal((2.0 / (sh.c_in * k * k) as f64).sqrt());
                        ConvWeights::Plain(
                            (0..pairs)
                                .map(|_| Array2::from_shape_simple_fn((k, k), || dist.sample(&mut rng)))
                                .collect(),
                        )
                    }
                };
                ConvParams {
                    in_channels: sh.c_in,
                    out_channels: sh.c_out,
                    weights,
                    bias: vec![0.0; sh.c_out],
                }
            })
            .collect();
        let mut fan_in = self.flat_features;
        let last = self.config.dense_widths.len() - 1;
        let dense = self
            .config
            .dense_widths
            .iter()
            .enumerate()
            .map(|(li, &out)| {
                let gain = if li == last { 1.0 } else { 2.0 };
                let dist = normal((gain / fan_in as f64).sqrt());
                let weights = Array2::from_shape_simple_fn((out, fan_in), || dist.sample(&mut rng));
                fan_in = out;
                DenseParams {
                    weights,
                    bias: vec![0.0; out],
                }
            })
            .collect();
        NetworkState {
            params: Params { conv, dense },
            stamp: fresh_stamp(),
        }
    }

    /// Wraps externally supplied parameters after checking their shapes.
    pub fn state_from_params(&self, params: Params) -> Result<NetworkState> {
        let reference = self.init_state().params;
        let same_shape = params.conv.len() == reference.conv.len()
            && params.dense.len() == reference.dense.len()
            && params.conv.iter().zip(&reference.conv).all(|(a, b)| {
                a.in_channels == b.in_channels
                    && a.out_channels == b.out_channels
                    && a.bias.len() == b.bias.len()
                    && match (&a.weights, &b.weights) {
                        (ConvWeights::Steered(x), ConvWeights::Steered(y)) => {
                            x.len() == y.len() && x.iter().all(|s| s.spec == self.config.basis)
                        }
                        (ConvWeights::Plain(x), ConvWeights::Plain(y)) => {
                            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.dim() == q.dim())
                        }
                        _ => false,
                    }
            })
            && params
                .dense
                .iter()
                .zip(&reference.dense)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len());
        if !same_shape {
            return Err(Error::invalid("parameter shapes do not match the network configuration"));
        }
        if !params.all_finite() {
            return Err(Error::Numerical("parameters contain non-finite values".into()));
        }
        Ok(NetworkState {
            params,
            stamp: fresh_stamp(),
        })
    }

    fn kernels(&self, params: &Params) -> Vec<LayerKernels> {
        params
            .conv
            .iter()
            .map(|layer| match &layer.weights {
                ConvWeights::Steered(sets) => {
                    let sizes: Vec<usize> = self.banks.iter().map(|b| b.size).collect();
                    let data = self
                        .banks
                        .iter()
                        .map(|bank| {
                            let n = bank.size * bank.size;
                            let mut d = vec![0.0; sets.len() * n];
                            for (set, out) in sets.iter().zip(d.chunks_mut(n)) {
                                bank.kernel_into(&set.c, out);
                            }
                            d
                        })
                        .collect();
                    LayerKernels { sizes, data }
                }
                ConvWeights::Plain(kernels) => LayerKernels {
                    sizes: vec![self.config.base_kernel_size],
                    data: vec![kernels.iter().flatten().copied().collect()],
                },
            })
            .collect()
    }

    fn prepare_input(&self, image: &Array2<f64>) -> Result<Vec<f64>> {
        let expected = (self.config.input_height, self.config.input_width);
        if image.dim() != expected {
            return Err(Error::invalid(format!(
                "image is {:?}, network expects {:?}",
                image.dim(),
                expected
            )));
        }
        Ok(upsample(image, self.config.upsample_factor).iter().copied().collect())
    }

    /// Correlates every output channel at every scale; returns per output
    /// channel the pooled map and winning scale indices.
    fn conv_pooled(&self, sh: &LayerShape, kern: &LayerKernels, input: &[f64]) -> (Vec<f64>, Vec<u8>) {
        let hw = sh.h * sh.w;
        let pad = kern.max_radius();
        let mut padded = Vec::new();
        let mut chan = Vec::new();
        for i in 0..sh.c_in {
            pad_columns(&input[i * hw..(i + 1) * hw], sh.h, sh.w, pad, &mut chan);
            padded.extend_from_slice(&chan);
        }
        let plane = padded.len() / sh.c_in;
        let mut pooled = vec![0.0; sh.c_out * hw];
        let mut arg = vec![0u8; sh.c_out * hw];
        let mut resp = vec![0.0; hw];
        for o in 0..sh.c_out {
            let best = &mut pooled[o * hw..(o + 1) * hw];
            let best_arg = &mut arg[o * hw..(o + 1) * hw];
            for (si, &size) in kern.sizes.iter().enumerate() {
                resp.fill(0.0);
                for i in 0..sh.c_in {
                    let k = kern.kernel(si, o * sh.c_in + i);
                    xcorr_same_acc_padded(
                        &mut resp,
                        &padded[i * plane..(i + 1) * plane],
                        pad,
                        sh.h,
                        sh.w,
                        k,
                        size,
                        size,
                    );
                }
                if si == 0 {
                    best.copy_from_slice(&resp);
                } else {
                    for ((b, a), &r) in best.iter_mut().zip(best_arg.iter_mut()).zip(&resp) {
                        if r > *b {
                            *b = r;
                            *a = si as u8;
                        }
                    }
                }
            }
        }
        (pooled, arg)
    }

    fn conv_layer_forward(
        &self,
        sh: &LayerShape,
        kern: &LayerKernels,
        bias: &[f64],
        input: Vec<f64>,
    ) -> (LayerCache, Vec<f64>) {
        let hw = sh.h * sh.w;
        let (pooled, arg) = self.conv_pooled(sh, kern, &input);
        let cells = sh.ph * sh.pw;
        let mut out = vec![0.0; sh.pooled_len()];
        let mut winner = vec![0u32; sh.pooled_len()];
        let mut winner_scale = vec![0u8; sh.pooled_len()];
        let mut active = vec![false; sh.pooled_len()];
        for o in 0..sh.c_out {
            let pre = &pooled[o * hw..(o + 1) * hw];
            for py in 0..sh.ph {
                for px in 0..sh.pw {
                    let mut best_idx = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for y in py * sh.pool..((py + 1) * sh.pool).min(sh.h) {
                        for x in px * sh.pool..((px + 1) * sh.pool).min(sh.w) {
                            let v = (pre[y * sh.w + x] + bias[o]).max(0.0);
                            if v > best {
                                best = v;
                                best_idx = y * sh.w + x;
                            }
                        }
                    }
                    let q = o * cells + py * sh.pw + px;
                    out[q] = best;
                    winner[q] = best_idx as u32;
                    winner_scale[q] = arg[o * hw + best_idx];
                    active[q] = pre[best_idx] + bias[o] > 0.0;
                }
            }
        }
        (
            LayerCache {
                input,
                winner,
                winner_scale,
                active,
            },
            out,
        )
    }

    fn forward_inner(&self, params: &Params, kernels: &[LayerKernels], image: &Array2<f64>) -> Result<ForwardCache> {
        let mut x = self.prepare_input(image)?;
        let mut layers = Vec::with_capacity(self.shapes.len());
        for ((sh, kern), p) in self.shapes.iter().zip(kernels).zip(&params.conv) {
            let (cache, out) = self.conv_layer_forward(sh, kern, &p.bias, x);
            layers.push(cache);
            x = out;
        }
        let last = params.dense.len() - 1;
        let mut dense_inputs = Vec::with_capacity(params.dense.len());
        let mut dense_pre = Vec::with_capacity(params.dense.len());
        for (li, layer) in params.dense.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (zr, row) in z.iter_mut().zip(layer.weights.rows()) {
                *zr += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            let next = if li == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            dense_inputs.push(std::mem::replace(&mut x, next));
            dense_pre.push(z);
        }
        Ok(ForwardCache {
            stamp: 0,
            layers,
            dense_inputs,
            dense_pre,
            scores: x,
        })
    }

    fn backward_inner(&self, params: &Params, kernels: &[LayerKernels], cache: &ForwardCache, loss_grad: &[f64]) -> RawGrads {
        let mut dense_w: Vec<Array2<f64>> = params.dense.iter().map(|d| Array2::zeros(d.weights.dim())).collect();
        let mut dense_b: Vec<Vec<f64>> = params.dense.iter().map(|d| vec![0.0; d.bias.len()]).collect();
        let last = params.dense.len() - 1;
        let mut dz = loss_grad.to_vec();
        for li in (0..params.dense.len()).rev() {
            if li != last {
                for (g, &z) in dz.iter_mut().zip(&cache.dense_pre[li]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &cache.dense_inputs[li];
            let mut dx = vec![0.0; input.len()];
            for (r, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                dense_b[li][r] += g;
                let mut wrow = dense_w[li].row_mut(r);
                for (w, &a) in wrow.iter_mut().zip(input) {
                    *w += g * a;
                }
                for (d, &w) in dx.iter_mut().zip(params.dense[li].weights.row(r)) {
                    *d += g * w;
                }
            }
            dz = dx;
        }

        let mut dk: Vec<LayerKernels> = kernels.iter().map(LayerKernels::zeros_like).collect();
        let mut conv_bias: Vec<Vec<f64>> = self.shapes.iter().map(|sh| vec![0.0; sh.c_out]).collect();
        let mut d_out = dz;
        for li in (0..self.shapes.len()).rev() {
            let sh = &self.shapes[li];
            let lc = &cache.layers[li];
            let kern = &kernels[li];
            let hw = sh.h * sh.w;
            let cells = sh.ph * sh.pw;
            let mut d_in = if li > 0 { Some(vec![0.0; sh.c_in * hw]) } else { None };
            for o in 0..sh.c_out {
                for q in o * cells..(o + 1) * cells {
                    let g = d_out[q];
                    if g == 0.0 || !lc.active[q] {
                        continue;
                    }
                    conv_bias[li][o] += g;
                    let p = lc.winner[q] as usize;
                    let si = lc.winner_scale[q] as usize;
                    let size = kern.sizes[si];
                    let n = size * size;
                    let (y, x) = (p / sh.w, p % sh.w);
                    for i in 0..sh.c_in {
                        let pair = o * sh.c_in + i;
                        xcorr_same_backprop_pixel(
                            g,
                            y,
                            x,
                            &lc.input[i * hw..(i + 1) * hw],
                            sh.h,
                            sh.w,
                            kern.kernel(si, pair),
                            &mut dk[li].data[si][pair * n..(pair + 1) * n],
                            d_in.as_mut().map(|d| &mut d[i * hw..(i + 1) * hw]),
                            size,
                            size,
                        );
                    }
                }
            }
            if let Some(d) = d_in {
                d_out = d;
            }
        }
        RawGrads {
            kernels: dk,
            conv_bias,
            dense_w,
            dense_b,
        }
    }

    fn project(&self, params: &Params, raw: RawGrads) -> Params {
        let mut grad = params.zeros_like();
        for (li, layer) in grad.conv.iter_mut().enumerate() {
            let dk = &raw.kernels[li];
            match &mut layer.weights {
                ConvWeights::Steered(sets) => {
                    for (si, bank) in self.banks.iter().enumerate() {
                        let n = bank.size * bank.size;
                        for (pair, set) in sets.iter_mut().enumerate() {
                            bank.project_into(&dk.data[si][pair * n..(pair + 1) * n], &mut set.c);
                        }
                    }
                }
                ConvWeights::Plain(kernels) => {
                    let n = self.config.base_kernel_size.pow(2);
                    for (pair, k) in kernels.iter_mut().enumerate() {
                        k.iter_mut()
                            .zip(&dk.data[0][pair * n..(pair + 1) * n])
                            .for_each(|(a, b)| *a = *b);
                    }
                }
            }
            layer.bias.clone_from(&raw.conv_bias[li]);
        }
        for (li, layer) in grad.dense.iter_mut().enumerate() {
            layer.weights.assign(&raw.dense_w[li]);
            layer.bias.clone_from(&raw.dense_b[li]);
        }
        grad
    }

    /// Applies the configured preconditioner to a gradient in place.
    fn precondition(&self, grad: &mut Params) {
        let Some(p) = &self.gram_inv else { return };
        let d = (p.len() as f64).sqrt() as usize;
        let mut v = vec![0.0; d];
        for layer in &mut grad.conv {
            if let ConvWeights::Steered(sets) = &mut layer.weights {
                for set in sets {
                    for (pair, c) in v.chunks_mut(2).zip(&set.c) {
                        pair[0] = c.re;
                        pair[1] = c.im;
                    }
                    for (c, rows) in set.c.iter_mut().zip(p.chunks(2 * d)) {
                        let (r0, r1) = rows.split_at(d);
                        c.re = r0.iter().zip(&v).map(|(a, b)| a * b).sum();
                        c.im = r1.iter().zip(&v).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
    }

    /// Class scores for one image plus the intermediates needed by
    /// [`Network::backward`].
    pub fn forward(&self, state: &NetworkState, image: &Array2<f64>) -> Result<ForwardCache> {
        let kernels = self.kernels(&state.params);
        let mut cache = self.forward_inner(&state.params, &kernels, image)?;
        cache.stamp = state.stamp;
        Ok(cache)
    }

    /// Gradient of `sum(loss_grad * scores)` with respect to every parameter.
    pub fn backward(&self, state: &NetworkState, cache: &ForwardCache, loss_grad: &[f64]) -> Result<Params> {
        if cache.stamp != state.stamp {
            return Err(Error::InvalidState(
                "forward cache was produced by different or since-modified parameters".into(),
            ));
        }
        if loss_grad.len() != cache.scores.len() {
            return Err(Error::invalid(format!(
                "loss gradient has {} entries, expected {}",
                loss_grad.len(),
                cache.scores.len()
            )));
        }
        let kernels = self.kernels(&state.params);
        let raw = self.backward_inner(&state.params, &kernels, cache, loss_grad);
        Ok(self.project(&state.params, raw))
    }

    /// Mean cross-entropy loss over a set, used for gradient checks.
    pub fn loss(&self, state: &NetworkState, images: &[Array2<f64>], labels: &[u8]) -> Result<f64> {
        let kernels = self.kernels(&state.params);
        let mut total = 0.0;
        for (img, &l) in images.iter().zip(labels) {
            let cache = self.forward_inner(&state.params, &kernels, img)?;
            total += softmax_cross_entropy(&cache.scores, l as usize).0;
        }
        Ok(total / images.len() as f64)
    }

    pub fn predict(&self, state: &NetworkState, image: &Array2<f64>) -> Result<usize> {
        Ok(argmax(&self.forward(state, image)?.scores))
    }

    fn check_set(&self, set: &LabeledImageSet) -> Result<()> {
        if (set.height, set.width) != (self.config.input_height, self.config.input_width) {
            return Err(Error::invalid(format!(
                "dataset images are {}x{}, network expects {}x{}",
                set.height, set.width, self.config.input_height, self.config.input_width
            )));
        }
        if set.labels.iter().any(|&l| l as usize >= self.config.num_classes()) {
            return Err(Error::invalid("dataset labels exceed the number of classes"));
        }
        Ok(())
    }

    /// Fraction of misclassified images (argmax prediction).
    pub fn evaluate(&self, state: &NetworkState, set: &LabeledImageSet) -> Result<f64> {
        self.check_set(set)?;
        if set.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty set"));
        }
        let kernels = self.kernels(&state.params);
        let wrong = set
            .images
            .par_iter()
            .zip(&set.labels)
            .map(|(img, &l)| {
                let cache = self.forward_inner(&state.params, &kernels, img)?;
                Ok(usize::from(argmax(&cache.scores) != l as usize))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(wrong as f64 / set.len() as f64)
    }

    /// Minibatch SGD with momentum on softmax cross-entropy. Deterministic
    /// for a fixed seed regardless of the rayon thread count. `on_epoch` sees
    /// each epoch's metrics as soon as they are available.
    pub fn train(
        &self,
        state: &mut NetworkState,
        train: &LabeledImageSet,
        val: Option<&LabeledImageSet>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        self.check_set(train)?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if let Some(v) = val {
            self.check_set(v)?;
        }
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut velocity = vec![0.0; state.params.len()];
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let kernels = self.kernels(&state.params);
                let params = &state.params;
                let chunks = batch
                    .par_chunks(GRAD_CHUNK)
                    .map(|chunk| {
                        let mut acc: Option<RawGrads> = None;
                        let mut loss = 0.0;
                        let mut hits = 0usize;
                        for &idx in chunk {
                            let label = train.labels[idx] as usize;
                            let cache = self.forward_inner(params, &kernels, &train.images[idx])?;
                            let (l, g) = softmax_cross_entropy(&cache.scores, label);
                            loss += l;
                            hits += usize::from(argmax(&cache.scores) == label);
                            let raw = self.backward_inner(params, &kernels, &cache, &g);
                            match &mut acc {
                                Some(a) => a.add(&raw),
                                None => acc = Some(raw),
                            }
                        }
                        Ok((loss, hits, acc.expect("chunks are non-empty")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut total: Option<RawGrads> = None;
                let mut batch_loss = 0.0;
                for (l, hits, raw) in chunks {
                    batch_loss += l;
                    correct += hits;
                    match &mut total {
                        Some(t) => t.add(&raw),
                        None => total = Some(raw),
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, step {}",
                        step + 1
                    )));
                }
                loss_sum += batch_loss;
                let mut grad = self.project(params, total.expect("batch is non-empty"));
                self.precondition(&mut grad);
                let grad = grad.to_flat();
                let scale = cfg.learning_rate / batch.len() as f64;
                for (v, g) in velocity.iter_mut().zip(&grad) {
                    *v = cfg.momentum * *v - scale * g;
                }
                let mut it = velocity.iter();
                state.params_mut().for_each_mut(|p| *p += *it.next().expect("same length"));
                step += 1;
            }
            if !state.params.all_finite() {
                return Err(Error::Numerical(format!("parameters diverged in epoch {epoch}")));
            }
            let val_acc = match val {
                Some(v) => Some(1.0 - self.evaluate(state, v)?),
                None => None,
            };
            let metrics = EpochMetrics {
                epoch,
                step,
                loss: loss_sum / train.len() as f64,
                train_acc: correct as f64 / train.len() as f64,
                val_acc,
            };
            on_epoch(&metrics);
            history.push(metrics);
        }
        Ok(history)
    }

    /// Full scale pyramids of conv layer `layer` (0-based) for one image,
    /// with the layer's bias added to every map.
    pub fn layer_responses(
        &self,
        state: &NetworkState,
        image: &Array2<f64>,
        layer: usize,
    ) -> Result<Vec<ScalePyramidResponse>> {
        if layer >= self.shapes.len() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range (network has {})",
                self.shapes.len()
            )));
        }
        let kernels = self.kernels(&state.params);
        let mut x = self.prepare_input(image)?;
        for li in 0..layer {
            let (_, out) = self.conv_layer_forward(&self.shapes[li], &kernels[li], &state.params.conv[li].bias, x);
            x = out;
        }
        let sh = &self.shapes[layer];
        let kern = &kernels[layer];
        let hw = sh.h * sh.w;
        let bias = &state.params.conv[layer].bias;
        Ok((0..sh.c_out)
            .map(|o| {
                let per_scale: Vec<Array2<f64>> = kern
                    .sizes
                    .iter()
                    .enumerate()
                    .map(|(si, &size)| {
                        let mut resp = vec![bias[o]; hw];
                        for i in 0..sh.c_in {
                            xcorr_same_acc(
                                &mut resp,
                                &x[i * hw..(i + 1) * hw],
                                sh.h,
                                sh.w,
                                kern.kernel(si, o * sh.c_in + i),
                                size,
                                size,
                            );
                        }
                        Array2::from_shape_vec((sh.h, sh.w), resp).expect("shape")
                    })
                    .collect();
                let (pooled, argmax_scale) = max_across_scales(&per_scale);
                ScalePyramidResponse {
                    per_scale,
                    pooled,
                    argmax_scale,
                }
            })
            .collect())
    }

    /// Materialized real kernels of conv layer `layer`, indexed
    /// `[scale][o * c_in + i]`.
    pub fn layer_kernels(&self, state: &NetworkState, layer: usize) -> Result<Vec<Vec<Array2<f64>>>> {
        let kernels = self.kernels(&state.params);
        let kern = kernels
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        Ok(kern
            .sizes
            .iter()
            .enumerate()
            .map(|(si, &size)| {
                kern.data[si]
                    .chunks(size * size)
                    .map(|c| Array2::from_shape_vec((size, size), c.to_vec()).expect("shape"))
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(widths: Vec<usize>, pools: Vec<usize>, kind: ConvKind) -> NetworkConfig {
        NetworkConfig {
            input_height: 9,
            input_width: 11,
            channel_widths: widths,
            scales: vec![1.0, 1.4, 2.0],
            base_kernel_size: 5,
            spatial_pool_sizes: pools,
            dense_widths: vec![7, 4],
            conv_kind: kind,
            learning_rate: 0.05,
            momentum: 0.5,
            epochs: 3,
            batch_size: 3,
            seed: 11,
            ..NetworkConfig::desk()
        }
    }

    fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array2::from_shape_simple_fn((h, w), || rng.random::<f64>()))
            .collect()
    }

    fn analytic_grad(net: &Network, state: &NetworkState, images: &[Array2<f64>], labels: &[u8]) -> Vec<f64> {
        let mut total = vec![0.0; state.params().len()];
        for (img, &l) in images.iter().zip(labels) {
            let cache = net.forward(state, img).unwrap();
            let (_, g) = softmax_cross_entropy(&cache.scores, l as usize);
            let grad = net.backward(state, &cache, &g).unwrap().to_flat();
            total.iter_mut().zip(&grad).for_each(|(t, g)| *t += g / images.len() as f64);
        }
        total
    }

    fn routes_match(net: &Network, a: &NetworkState, b: &NetworkState, images: &[Array2<f64>]) -> bool {
        images
            .iter()
            .all(|img| net.forward(a, img).unwrap().same_routes(&net.forward(b, img).unwrap()))
    }

    /// Central differences on randomly drawn parameters from `range`; probes
    /// whose perturbation changes a pooling route, or whose gradient is
    /// numerically zero, are re-drawn. Returns the worst relative error.
    /// Ten random images with distinct labels, full-batch, 200 steps.
    fn overfit_harness(seed: u64) -> (Network, LabeledImageSet) {
        let mut cfg = tiny(vec![4, 6], vec![2, 2], ConvKind::Steered);
        cfg.dense_widths = vec![16, 10];
        cfg.batch_size = 10;
        cfg.epochs = 200;
        cfg.learning_rate = 0.05;
        cfg.momentum = 0.9;
        cfg.seed = seed;
        let images = random_images(10, 9, 11, 8 + seed);
        let set = LabeledImageSet::new(images, (0..10).collect(), 9, 11).unwrap();
        (Network::new(cfg).unwrap(), set)
    }

    fn max_fd_error(net: &Network, probes: usize, range: std::ops::Range<usize>, seed: u64) -> f64 {
        let state = net.init_state();
        let cfg = net.config();
        let images = random_images(2, cfg.input_height, cfg.input_width, seed);
        let labels = [1u8, 3];
        let grad = analytic_grad(net, &state, &images, &labels);
        let base = state.params().to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let (mut done, mut tries) = (0, 0);
        while done < probes {
            tries += 1;
            assert!(tries < 50 * probes, "too many degenerate probes");
            let idx = rng.random_range(range.clone());
            let eval = |delta: f64| {
                let mut p = state.params().clone();
                let mut flat = base.clone();
                flat[idx] += delta;
                p.set_flat(&flat).unwrap();
                net.state_from_params(p).unwrap()
            };
            let (plus, minus) = (eval(h), eval(-h));
            if !routes_match(net, &plus, &state, &images) || !routes_match(net, &minus, &state, &images) {
                continue;
            }
            let numeric = (net.loss(&plus, &images, &labels).unwrap() - net.loss(&minus, &images, &labels).unwrap())
                / (2.0 * h);
            let scale = numeric.abs().max(grad[idx].abs());
            if scale < 1e-7 {
                continue;
            }
            worst = worst.max((numeric - grad[idx]).abs() / scale);
            done += 1;
        }
        worst
    }

    #[test]
    fn parameter_counts_follow_channel_algebra() {
        let net = Network::new(tiny(vec![3, 5], vec![2, 2], ConvKind::Steered)).unwrap();
        let state = net.init_state();
        assert_eq!(state.params().conv_param_count(0), 3 * 48 + 3);
        assert_eq!(state.params().conv_param_count(1), 3 * 5 * 48 + 5);
        let full = Network::new(NetworkConfig::default()).unwrap().init_state();
        assert_eq!(full.params().conv_param_count(1), 30 * 60 * 48 + 60);
        assert_eq!(full.params().conv_param_count(2), 60 * 90 * 48 + 90);
    }

    #[test]
    fn zero_image_gives_equal_scores() {
        let net = Network::new(tiny(vec![3, 4], vec![2, 3], ConvKind::Steered)).unwrap();
        let state = net.init_state();
        let cache = net.forward(&state, &Array2::zeros((9, 11))).unwrap();
        assert!(cache.scores.iter().all(|&s| s == cache.scores[0]));
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let net = Network::new(tiny(vec![3, 4, 2], vec![2, 2, 2], ConvKind::Steered)).unwrap();
        let state = net.init_state();
        let img = &random_images(1, 9, 11, 3)[0];
        let a = net.forward(&state, img).unwrap();
        let b = net.forward(&state, img).unwrap();
        assert_eq!(a.scores.len(), 4);
        assert!(a.scores.iter().all(|s| s.is_finite()));
        assert_eq!(
            a.scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>(),
            b.scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let net = Network::new(tiny(vec![2], vec![2], ConvKind::Steered)).unwrap();
        let state = net.init_state();
        assert!(matches!(
            net.forward(&state, &Array2::zeros((9, 10))),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let net = Network::new(tiny(vec![2], vec![2], ConvKind::Steered)).unwrap();
        let mut state = net.init_state();
        let img = &random_images(1, 9, 11, 4)[0];
        let cache = net.forward(&state, img).unwrap();
        state.params_mut().conv[0].bias[0] += 0.1;
        assert!(matches!(net.backward(&state, &cache, &[0.0; 4]), Err(Error::InvalidState(_))));
        let other = net.init_state();
        assert!(matches!(net.backward(&other, &cache, &[0.0; 4]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let net = Network::new(tiny(vec![3, 2], vec![2, 2], ConvKind::Steered)).unwrap();
        let state = net.init_state();
        let img = &random_images(1, 9, 11, 5)[0];
        let cache = net.forward(&state, img).unwrap();
        let grad = net.backward(&state, &cache, &[0.0; 4]).unwrap();
        assert!(grad.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_layer_gradients_match_finite_differences() {
        let net = Network::new(tiny(vec![4], vec![2], ConvKind::Steered)).unwrap();
        let coeffs = 4 * 48;
        let err = max_fd_error(&net, 20, 0..coeffs, 21);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn deep_gradients_match_finite_differences() {
        let net = Network::new(tiny(vec![3, 3, 2], vec![2, 2, 2], ConvKind::Steered)).unwrap();
        let p = net.init_state().params().clone();
        let mut start = 0;
        for layer in 0..3 {
            let n = p.conv_param_count(layer);
            let err = max_fd_error(&net, 5, start..start + n, 30 + layer as u64);
            assert!(err < 1e-3, "layer {layer}: relative error {err}");
            start += n;
        }
        let err = max_fd_error(&net, 5, start..p.len(), 40);
        assert!(err < 1e-4, "dense: relative error {err}");
    }

    #[test]
    fn plain_kernel_gradients_match_finite_differences() {
        let net = Network::new(tiny(vec![3, 2], vec![2, 2], ConvKind::Plain)).unwrap();
        let n = net.init_state().params().conv_param_count(0) + net.init_state().params().conv_param_count(1);
        let err = max_fd_error(&net, 10, 0..n, 50);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn toy_set(n: usize, seed: u64) -> LabeledImageSet {
        let images = random_images(n, 9, 11, seed);
        let labels = (0..n).map(|i| (i % 4) as u8).collect();
        LabeledImageSet::new(images, labels, 9, 11).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny(vec![2, 2], vec![2, 2], ConvKind::Steered);
        cfg.learning_rate = 0.0;
        let net = Network::new(cfg).unwrap();
        let mut state = net.init_state();
        let before = state.params().clone();
        net.train(&mut state, &toy_set(6, 1), None, |_| {}).unwrap();
        assert_eq!(state.params(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let net = Network::new(tiny(vec![3, 2], vec![2, 2], ConvKind::Steered)).unwrap();
        let set = toy_set(9, 2);
        let run = || {
            let mut state = net.init_state();
            let m = net.train(&mut state, &set, Some(&set), |_| {}).unwrap();
            (state.into_params().to_flat(), m)
        };
        let (pa, ma) = run();
        let (pb, mb) = run();
        assert_eq!(ma, mb);
        assert_eq!(
            pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ten_samples_are_memorized() {
        let (net, set) = overfit_harness(0);
        let mut state = net.init_state();
        let metrics = net.train(&mut state, &set, None, |_| {}).unwrap();
        assert_eq!(metrics.last().unwrap().step, 200);
        assert_eq!(net.evaluate(&state, &set).unwrap(), 0.0);
    }

    #[test]
    fn first_epoch_lowers_loss_for_most_seeds() {
        let mut decreased = 0;
        for seed in 0..20 {
            let (mut net, set) = overfit_harness(seed);
            net.config.epochs = 1;
            let mut state = net.init_state();
            let before = net.loss(&state, &set.images, &set.labels).unwrap();
            net.train(&mut state, &set, None, |_| {}).unwrap();
            decreased += usize::from(net.loss(&state, &set.images, &set.labels).unwrap() < before);
        }
        assert!(decreased >= 19, "loss fell for {decreased}/20 seeds");
    }

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0, 2.0, 3.0], 2);
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[2] < 0.0);
    }

    #[test]
    fn layer_responses_match_scale_invariant_forward() {
        let net = Network::new(tiny(vec![2], vec![2], ConvKind::Steered)).unwrap();
        let mut state = net.init_state();
        state.params_mut().conv[0].bias = vec![0.0, 0.0];
        let img = &random_images(1, 9, 11, 13)[0];
        let got = net.layer_responses(&state, img, 0).unwrap();
        let ConvWeights::Steered(sets) = &state.params().conv[0].weights else {
            unreachable!()
        };
        let coeffs: Vec<Vec<CoefficientSet>> = sets.iter().map(|s| vec![s.clone()]).collect();
        let up = upsample(img, 2);
        let want = crate::convengine::scale_invariant_forward(&[up], &coeffs, &net.config().scales, 5).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert_eq!(a.argmax_scale, b.argmax_scale);
            for (x, y) in a.pooled.iter().zip(&b.pooled) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = tiny(vec![2], vec![2], ConvKind::Steered);
        let cases = [
            NetworkConfig {
                scales: vec![2.0, 1.0],
                ..ok.clone()
            },
            NetworkConfig {
                base_kernel_size: 6,
                ..ok.clone()
            },
            NetworkConfig {
                spatial_pool_sizes: vec![2, 2],
                ..ok.clone()
            },
            NetworkConfig {
                momentum: 1.0,
                ..ok.clone()
            },
            NetworkConfig {
                dense_widths: vec![],
                ..ok.clone()
            },
        ];
        for cfg in cases {
            assert!(Network::new(cfg).is_err());
        }
    }

    #[test]
    fn geometric_grid_endpoints() {
        let s = geometric_scales(1.0, 2.4, 5);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[4], 2.4);
        assert!((s[2] - 2.4f64.sqrt()).abs() < 1e-12);
    }
}
