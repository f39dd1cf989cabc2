//! Seeded residual CNNs with an optional low-capacity bottleneck.
//!
//! A regular block is `relu(x + conv(relu(conv(x))))` with two dense 3x3
//! convolutions on `channels` channels. The bottleneck block narrows to
//! `channels / 4` with a dense 3x3 followed by a depthwise 3x3, and the block
//! after it widens back with two dense 3x3 convolutions; neither has a skip.
//!
//! Weights are He-initialized, then every convolution is batchnorm-folded
//! with statistics measured on a Gaussian probe batch, so each layer's
//! pre-activation output has zero mean and unit variance per channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Block, Layer, ModelGraph};
use crate::error::{Error, Result};
use crate::nn::{conv2d_forward, fold_batchnorm, BatchNorm, LayerSpec};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_blocks: usize,
    pub channels: usize,
    /// Index (0-based) of the depthwise bottleneck block.
    pub bottleneck_at: Option<usize>,
    /// Spatial size of the square input.
    pub input_hw: usize,
    pub weight_bits: u32,
    /// Samples in the batch used to measure batchnorm statistics.
    pub probe_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            channels: 8,
            bottleneck_at: Some(5),
            input_hw: 6,
            weight_bits: 4,
            probe_samples: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn reduced_channels(&self) -> usize {
        (self.channels / 4).max(1)
    }

    fn block_layers(&self, b: usize) -> (Vec<LayerSpec>, bool) {
        let c = self.channels;
        let r = self.reduced_channels();
        let bits = self.weight_bits;
        let dense = |i, o| LayerSpec::conv(i, o, 3, 1, 1).with_bits(bits);
        match self.bottleneck_at {
            Some(n) if n == b => (vec![dense(c, r), LayerSpec::conv(r, r, 3, 1, r).with_bits(bits)], false),
            Some(n) if n + 1 == b => (vec![dense(r, c), dense(c, c)], false),
            _ => (vec![dense(c, c), dense(c, c)], true),
        }
    }
}

fn per_channel_stats(z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = z.dims4()?;
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, chunk) in z.data().chunks(h * w).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in z.data().chunks(h * w).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

pub fn generate_synthetic_model(cfg: &SynthConfig) -> Result<ModelGraph> {
    if cfg.num_blocks < 2 {
        return Err(Error::InvalidArgument(format!(
            "a synthetic model needs at least 2 blocks, got {}",
            cfg.num_blocks
        )));
    }
    if cfg.channels == 0 || cfg.input_hw == 0 || cfg.probe_samples < 2 {
        return Err(Error::InvalidArgument("channels, input size and probe batch must be positive".into()));
    }
    if let Some(b) = cfg.bottleneck_at {
        if b >= cfg.num_blocks {
            return Err(Error::OutOfRange(format!(
                "bottleneck block {b} in a {}-block model",
                cfg.num_blocks
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hw = cfg.input_hw;
    let probe_len = cfg.probe_samples * cfg.channels * hw * hw;
    let mut x = Tensor::new(
        vec![cfg.probe_samples, cfg.channels, hw, hw],
        (0..probe_len).map(|_| rng.sample(StandardNormal)).collect(),
    )?;

    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    for b in 0..cfg.num_blocks {
        let (specs, residual) = cfg.block_layers(b);
        let start = layers.len();
        let block_input = x.clone();
        let n_specs = specs.len();
        for (k, spec) in specs.into_iter().enumerate() {
            spec.validate()?;
            let fan_in = (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w;
            let std = (2.0 / fan_in as f64).sqrt();
            let shape = spec.weight_shape();
            let raw = Tensor::new(
                shape.to_vec(),
                (0..spec.params()).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            )?;
            let zero_bias = vec![0.0; spec.out_channels];
            let z = conv2d_forward(&x, &raw, &zero_bias, &spec)?;
            let (mean, var) = per_channel_stats(&z)?;
            let bn = BatchNorm {
                gamma: vec![1.0; spec.out_channels],
                beta: vec![0.0; spec.out_channels],
                mean,
                var,
            };
            let (w, bias) = fold_batchnorm(&raw, &zero_bias, &bn, BN_EPS)?;
            let w = w.map(|v| v as f32 as f64);
            let bias: Vec<f64> = bias.iter().map(|&v| v as f32 as f64).collect();

            let mut z = conv2d_forward(&x, &w, &bias, &spec)?;
            if residual && k + 1 == n_specs {
                z = z.add(&block_input)?;
            }
            x = z.map(|v| spec.activate(v));
            layers.push(Layer { spec, weights: w, bias });
        }
        blocks.push(Block {
            start,
            end: layers.len(),
            residual,
        });
    }
    ModelGraph::new([cfg.channels, hw, hw], layers, blocks)
}
