//! Minimal convolutional network math: grouped 2-D convolution with an exact
//! backward pass, batchnorm folding, ReLU/ReLU6 and residual modules.
//!
//! Layouts are NCHW for activations and OIHW for weights; convolution is
//! cross-correlation (no kernel flip).

mod conv;
mod module;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use module::{
    backward_traced, forward_traced, module_forward, ActTransform, ForwardTrace, LayerParams,
    ModuleGrads, ModuleInput, ModuleQuant,
};

/// Hyper-parameters of one convolutional layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_relu: bool,
    /// Clamp the ReLU at 6 (MobileNetV2 style). Ignored without `has_relu`.
    #[serde(default)]
    pub relu6: bool,
    /// Weight bit-width `b_i`.
    pub bitwidth_weights: u32,
}

/// Dense (groups == 1), depthwise (groups == channels) or anything in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupPattern {
    Dense,
    Depthwise,
    Grouped,
}

impl LayerSpec {
    /// Square-kernel layer with "same" padding.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: kernel / 2,
            groups,
            has_relu: true,
            relu6: false,
            bitwidth_weights: 4,
        }
    }

    pub fn with_relu(mut self, has_relu: bool) -> Self {
        self.has_relu = has_relu;
        self
    }

    pub fn with_bits(mut self, bits: u32) -> Self {
        self.bitwidth_weights = bits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("groups", self.groups),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidLayer(format!("{name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidLayer(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if !(2..=16).contains(&self.bitwidth_weights) {
            return Err(Error::InvalidLayer(format!(
                "weight bit-width {} outside 2..=16",
                self.bitwidth_weights
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Number of weight elements (bias excluded).
    pub fn params(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(
                "padded input spatial size",
                format!(">= kernel {}x{}", self.kernel_h, self.kernel_w),
                format!("{ph}x{pw}"),
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn group_pattern(&self) -> GroupPattern {
        if self.groups == 1 {
            GroupPattern::Dense
        } else if self.groups == self.in_channels && self.groups == self.out_channels {
            GroupPattern::Depthwise
        } else {
            GroupPattern::Grouped
        }
    }

    pub fn activate(&self, z: f64) -> f64 {
        if !self.has_relu {
            z
        } else if self.relu6 {
            z.clamp(0.0, 6.0)
        } else {
            z.max(0.0)
        }
    }

    /// Derivative of the activation at pre-activation `z` (0 at the kinks).
    pub fn activate_grad(&self, z: f64) -> f64 {
        if !self.has_relu || (z > 0.0 && (!self.relu6 || z < 6.0)) {
            1.0
        } else {
            0.0
        }
    }
}

/// Batchnorm statistics and affine parameters, one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Folds `bn(conv(x))` into a single convolution.
///
/// `w' = w * gamma / sqrt(var + eps)` per output channel and
/// `b' = (b - mean) * gamma / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(weights: &Tensor, bias: &[f64], bn: &BatchNorm, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let out = weights.outer();
    for (name, v) in [
        ("bias", bias.len()),
        ("bn gamma", bn.gamma.len()),
        ("bn beta", bn.beta.len()),
        ("bn mean", bn.mean.len()),
        ("bn var", bn.var.len()),
    ] {
        if v != out {
            return Err(Error::shape(format!("{name} length"), out, v));
        }
    }
    if let Some((channel, &value)) = bn.var.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeVariance { channel, value });
    }
    if let Some(channel) = bn.var.iter().position(|v| v + eps <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "var + eps is zero at channel {channel}"
        )));
    }

    let inner = weights.inner_len();
    let mut w = weights.clone();
    let mut b = vec![0.0; out];
    for o in 0..out {
        let k = bn.gamma[o] / (bn.var[o] + eps).sqrt();
        for x in &mut w.data_mut()[o * inner..(o + 1) * inner] {
            *x *= k;
        }
        b[o] = (bias[o] - bn.mean[o]) * k + bn.beta[o];
    }
    Ok((w, b))
}

/// Per-channel batchnorm over an NCHW tensor, used as the unfolded reference.
pub fn batchnorm_forward(x: &Tensor, bn: &BatchNorm, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if bn.gamma.len() != c {
        return Err(Error::shape("batchnorm channels", c, bn.gamma.len()));
    }
    let mut y = x.clone();
    let hw = h * w;
    let data = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let k = bn.gamma[ch] / (bn.var[ch] + eps).sqrt();
            let off = (b * c + ch) * hw;
            for v in &mut data[off..off + hw] {
                *v = (*v - bn.mean[ch]) * k + bn.beta[ch];
            }
        }
    }
    Ok(y)
}
