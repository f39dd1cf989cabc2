use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::partition::ModuleSpec;
use crate::quant::{fake_quantize, fake_quantize_masked, QuantParams};
use crate::tensor::Tensor;

use super::{conv2d_backward, conv2d_forward, LayerSpec};

/// One layer's hyper-parameters and the weights to run it with.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub spec: &'a LayerSpec,
    pub weights: &'a Tensor,
    pub bias: &'a [f64],
}

/// Module input plus any residual sources that live before the module
/// (keyed by the absolute index of the layer whose input they are).
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleInput {
    pub main: Tensor,
    pub skips: BTreeMap<usize, Tensor>,
}

impl From<Tensor> for ModuleInput {
    fn from(main: Tensor) -> Self {
        Self {
            main,
            skips: BTreeMap::new(),
        }
    }
}

/// Quantizers for a module, one slot per layer.
#[derive(Debug, Clone, Default)]
pub struct ModuleQuant {
    pub weights: Vec<Option<QuantParams>>,
    pub activations: Vec<Option<QuantParams>>,
}

/// Transform applied to a layer's input before its convolution. `None`
/// leaves the input untouched; `Some((x, mask))` replaces it, with `mask`
/// marking the elements through which the gradient passes unchanged.
pub type ActTransform<'a> = dyn FnMut(usize, &Tensor) -> Option<(Tensor, Vec<bool>)> + 'a;

/// Intermediate values of one forward pass, kept for [`backward_traced`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Tensor>,
    transformed: Vec<Option<(Tensor, Vec<bool>)>>,
    preacts: Vec<Tensor>,
    pub output: Tensor,
}

impl ForwardTrace {
    /// Input of layer `k` of the module, before any transform.
    pub fn layer_input(&self, k: usize) -> &Tensor {
        &self.inputs[k]
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }
}

#[derive(Debug, Clone)]
pub struct ModuleGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
    pub input: Tensor,
}

fn check_layers(module: &ModuleSpec, layers: &[LayerParams<'_>]) -> Result<()> {
    if layers.len() != module.n_layers() {
        return Err(Error::shape(
            format!("layer count of module {}..{}", module.start, module.end),
            module.n_layers(),
            layers.len(),
        ));
    }
    Ok(())
}

fn add_in_place(acc: &mut Tensor, other: &Tensor, what: &str) -> Result<()> {
    acc.check_same_shape(other, what)?;
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

/// Runs the module, recording what the backward pass needs.
pub fn forward_traced(
    module: &ModuleSpec,
    layers: &[LayerParams<'_>],
    input: &ModuleInput,
    act: &mut ActTransform<'_>,
) -> Result<ForwardTrace> {
    check_layers(module, layers)?;
    let n = layers.len();
    let mut inputs: Vec<Tensor> = Vec::with_capacity(n);
    let mut transformed = Vec::with_capacity(n);
    let mut preacts = Vec::with_capacity(n);
    let mut x = input.main.clone();

    for (k, layer) in layers.iter().enumerate() {
        let idx = module.start + k;
        let t = act(k, &x);
        let conv_in = t.as_ref().map(|(q, _)| q).unwrap_or(&x);
        let mut z = conv2d_forward(conv_in, layer.weights, layer.bias, layer.spec)?;
        transformed.push(t);
        inputs.push(x);
        for span in module.residuals.iter().filter(|s| s.to == idx) {
            let src = if span.from >= module.start {
                &inputs[span.from - module.start]
            } else {
                input.skips.get(&span.from).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "module {}..{} needs the residual input of layer {}",
                        module.start, module.end, span.from
                    ))
                })?
            };
            add_in_place(&mut z, src, "residual operand")?;
        }
        x = z.map(|v| layer.spec.activate(v));
        preacts.push(z);
    }

    Ok(ForwardTrace {
        inputs,
        transformed,
        preacts,
        output: x,
    })
}

/// Back-propagates `grad_output` through a traced forward pass.
///
/// Gradients pass straight through the input transforms wherever their mask
/// is set and are zero elsewhere.
pub fn backward_traced(
    module: &ModuleSpec,
    layers: &[LayerParams<'_>],
    trace: &ForwardTrace,
    grad_output: &Tensor,
) -> Result<ModuleGrads> {
    check_layers(module, layers)?;
    trace.output.check_same_shape(grad_output, "grad_output")?;
    let n = layers.len();
    let mut pending: Vec<Option<Tensor>> = vec![None; n];
    let mut weights = vec![None; n];
    let mut biases = vec![Vec::new(); n];
    let mut g = grad_output.clone();

    for k in (0..n).rev() {
        let layer = &layers[k];
        let idx = module.start + k;
        let z = &trace.preacts[k];
        let dz = g.zip_map(z, |gv, zv| gv * layer.spec.activate_grad(zv))?;

        for span in module.residuals.iter().filter(|s| s.to == idx && s.from >= module.start) {
            let slot = &mut pending[span.from - module.start];
            match slot {
                Some(acc) => add_in_place(acc, &dz, "residual gradient")?,
                None => *slot = Some(dz.clone()),
            }
        }

        let (conv_in, mask) = match &trace.transformed[k] {
            Some((q, m)) => (q, Some(m)),
            None => (&trace.inputs[k], None),
        };
        let grads = conv2d_backward(conv_in, layer.weights, &dz, layer.spec)?;
        weights[k] = Some(grads.grad_weights);
        biases[k] = grads.grad_bias;
        let mut gx = grads.grad_input;
        if let Some(mask) = mask {
            for (v, &pass) in gx.data_mut().iter_mut().zip(mask) {
                if !pass {
                    *v = 0.0;
                }
            }
        }
        if let Some(extra) = pending[k].take() {
            add_in_place(&mut gx, &extra, "residual gradient")?;
        }
        g = gx;
    }

    Ok(ModuleGrads {
        weights: weights.into_iter().map(|w| w.expect("every layer visited")).collect(),
        biases,
        input: g,
    })
}

/// Evaluates a module: each layer is conv then activation, residual sources
/// are added before the activation of the layer that closes them.
///
/// With `quant`, weights are fake-quantized by nearest rounding and each
/// layer input is fake-quantized by its activation quantizer, if any.
pub fn module_forward(
    module: &ModuleSpec,
    layers: &[LayerParams<'_>],
    input: &ModuleInput,
    quant: Option<&ModuleQuant>,
) -> Result<Tensor> {
    check_layers(module, layers)?;
    let Some(quant) = quant else {
        let mut identity = |_: usize, _: &Tensor| None;
        return Ok(forward_traced(module, layers, input, &mut identity)?.output);
    };

    let mut qweights = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        qweights.push(match quant.weights.get(k).and_then(|q| q.as_ref()) {
            Some(q) => fake_quantize(layer.weights, q)?,
            None => layer.weights.clone(),
        });
    }
    let qlayers: Vec<LayerParams<'_>> = layers
        .iter()
        .zip(&qweights)
        .map(|(l, w)| LayerParams {
            spec: l.spec,
            weights: w,
            bias: l.bias,
        })
        .collect();

    let mut err = None;
    let mut act = |k: usize, x: &Tensor| {
        let q = quant.activations.get(k).and_then(|q| q.as_ref())?;
        match fake_quantize_masked(x, q) {
            Ok(r) => Some(r),
            Err(e) => {
                err = Some(e);
                None
            }
        }
    };
    let out = forward_traced(module, &qlayers, input, &mut act)?.output;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::ResidualSpan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_identity_layer() {
        let spec = LayerSpec::conv(1, 1, 1, 1, 1).with_relu(false);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let module = ModuleSpec::new(0, 1, vec![]);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let layers = [LayerParams {
            spec: &spec,
            weights: &w,
            bias: &[0.0],
        }];
        let y = module_forward(&module, &layers, &x.clone().into(), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn residual_with_zero_weights_passes_input() {
        let spec = LayerSpec::conv(2, 2, 3, 1, 1);
        let zero = Tensor::zeros(&spec.weight_shape());
        let bias = [0.0, 0.0];
        let module = ModuleSpec::new(0, 2, vec![ResidualSpan { from: 0, to: 1 }]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[2, 2, 4, 4], &mut rng);
        let layers = [
            LayerParams { spec: &spec, weights: &zero, bias: &bias },
            LayerParams { spec: &spec, weights: &zero, bias: &bias },
        ];
        let y = module_forward(&module, &layers, &x.clone().into(), None).unwrap();
        assert_eq!(y, x.map(|v| v.max(0.0)));
    }

    #[test]
    fn two_layers_equal_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = LayerSpec::conv(3, 4, 3, 1, 1);
        let b = LayerSpec::conv(4, 4, 3, 2, 4).with_relu(false);
        let wa = random_tensor(&a.weight_shape(), &mut rng);
        let wb = random_tensor(&b.weight_shape(), &mut rng);
        let ba = vec![0.1; 4];
        let bb = vec![-0.1; 4];
        let x = random_tensor(&[2, 3, 6, 6], &mut rng);
        let module = ModuleSpec::new(0, 2, vec![]);
        let layers = [
            LayerParams { spec: &a, weights: &wa, bias: &ba },
            LayerParams { spec: &b, weights: &wb, bias: &bb },
        ];
        let y = module_forward(&module, &layers, &x.clone().into(), None).unwrap();
        let h = conv2d_forward(&x, &wa, &ba, &a).unwrap().map(|v| v.max(0.0));
        let manual = conv2d_forward(&h, &wb, &bb, &b).unwrap();
        assert_eq!(y, manual);
    }

    #[test]
    fn external_skip_required() {
        let spec = LayerSpec::conv(1, 1, 1, 1, 1);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let module = ModuleSpec::new(1, 2, vec![ResidualSpan { from: 0, to: 1 }]);
        let layers = [LayerParams { spec: &spec, weights: &w, bias: &[0.0] }];
        let x = Tensor::filled(&[1, 1, 1, 1], 1.0);
        assert!(module_forward(&module, &layers, &x.clone().into(), None).is_err());
        let mut input = ModuleInput::from(x);
        input.skips.insert(0, Tensor::filled(&[1, 1, 1, 1], 2.0));
        let y = module_forward(&module, &layers, &input, None).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn wrong_layer_count_is_an_error() {
        let module = ModuleSpec::new(0, 2, vec![]);
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(module_forward(&module, &[], &x.into(), None).is_err());
    }
}
