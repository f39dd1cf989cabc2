//! Model graphs, their on-disk format, calibration data and the synthetic
//! model generator.

mod calib;
mod format;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{module_forward, LayerParams, LayerSpec, ModuleInput, ModuleQuant};
use crate::partition::{build_modules, Granularity, ResidualSpan};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

pub use calib::{
    generate_calibration, load_calibration, read_calibration, save_calibration, CalibrationSet, Distribution,
    CALIB_MAGIC,
};
pub use format::{load_model, save_model, ModelManifest, SCHEMA_VERSION};
pub use synth::{generate_synthetic_model, SynthConfig};

/// One convolutional layer with its (batchnorm-folded) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn params(&self) -> LayerParams<'_> {
        LayerParams {
            spec: &self.spec,
            weights: &self.weights,
            bias: &self.bias,
        }
    }
}

/// Contiguous layer range `start..end`; a residual block adds its input to
/// the pre-activation output of its last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    pub residual: bool,
}

/// A chain of convolutional layers grouped into blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub blocks: Vec<Block>,
}

impl ModelGraph {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>, blocks: Vec<Block>) -> Result<Self> {
        let g = Self {
            input_shape,
            layers,
            blocks,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Checks layer shapes, channel composition, spatial sizes and that the
    /// blocks partition the layers.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Consistency("model has no layers".into()));
        }
        let [c0, mut h, mut w] = self.input_shape;
        let mut channels = c0;
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push((c0, h, w));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.spec.validate()?;
            if layer.spec.in_channels != channels {
                return Err(Error::Consistency(format!(
                    "layer {i} expects {} input channels but receives {channels}",
                    layer.spec.in_channels
                )));
            }
            if layer.weights.shape() != layer.spec.weight_shape() {
                return Err(Error::Consistency(format!(
                    "layer {i} weights have shape {:?}, spec implies {:?}",
                    layer.weights.shape(),
                    layer.spec.weight_shape()
                )));
            }
            if layer.bias.len() != layer.spec.out_channels {
                return Err(Error::Consistency(format!(
                    "layer {i} has {} biases for {} output channels",
                    layer.bias.len(),
                    layer.spec.out_channels
                )));
            }
            (h, w) = layer.spec.output_hw(h, w)?;
            channels = layer.spec.out_channels;
            shapes.push((channels, h, w));
        }

        let mut next = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.start != next || block.end <= block.start {
                return Err(Error::Consistency(format!(
                    "block {b} covers {}..{}, expected to start at {next}",
                    block.start, block.end
                )));
            }
            next = block.end;
            if block.residual && shapes[block.start] != shapes[block.end.min(shapes.len() - 1)] {
                return Err(Error::Consistency(format!(
                    "residual block {b} changes its feature map shape ({:?} -> {:?})",
                    shapes[block.start],
                    shapes[block.end.min(shapes.len() - 1)]
                )));
            }
        }
        if next != self.layers.len() {
            return Err(Error::Consistency(format!(
                "blocks cover {next} of {} layers",
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn residual_spans(&self) -> Vec<ResidualSpan> {
        self.blocks
            .iter()
            .filter(|b| b.residual)
            .map(|b| ResidualSpan {
                from: b.start,
                to: b.end - 1,
            })
            .collect()
    }

    /// Block index of each layer.
    pub fn block_of(&self, layer: usize) -> Option<usize> {
        self.blocks.iter().position(|b| (b.start..b.end).contains(&layer))
    }

    /// Sets every layer's weight bit-width.
    pub fn set_weight_bits(&mut self, bits: u32) {
        for l in &mut self.layers {
            l.spec.bitwidth_weights = bits;
        }
    }

    /// Runs the whole network. `act` optionally fake-quantizes each layer's
    /// input (one slot per layer); weights are used as stored.
    pub fn forward(&self, input: &Tensor, act: Option<&[Option<QuantParams>]>) -> Result<Tensor> {
        let (n, c, h, w) = input.dims4()?;
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(
                "model input (C, H, W)",
                format!("{:?}", self.input_shape),
                format!("{:?}", [c, h, w]),
            ));
        }
        let _ = n;
        let mut x = input.clone();
        for m in build_modules(self, Granularity::Block) {
            let layers: Vec<LayerParams<'_>> = self.layers[m.start..m.end].iter().map(Layer::params).collect();
            let quant = act.map(|a| ModuleQuant {
                weights: vec![None; m.n_layers()],
                activations: a[m.start..m.end].to_vec(),
            });
            x = module_forward(&m, &layers, &ModuleInput::from(x), quant.as_ref())?;
        }
        Ok(x)
    }
}
