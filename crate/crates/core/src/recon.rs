//! Module-by-module reconstruction with learnable weight rounding.
//!
//! Each module minimizes the batch-mean squared Frobenius distance between
//! its full-precision output on full-precision inputs and its quantized
//! output on the inputs produced by the already-quantized predecessors,
//! plus a weighted rounding regularizer whose temperature anneals linearly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{CalibrationSet, Layer, ModelGraph};
use crate::nn::{backward_traced, forward_traced, module_forward, LayerParams, ModuleInput, ModuleQuant};
use crate::partition::{apply_scheme, build_modules, Granularity, GranularityScheme, ModuleSpec};
use crate::quant::{
    anneal_temperature, calibrate_scale, fake_quantize, fake_quantize_masked, hard_quantize_weights,
    rounding_regularizer, soft_quantize_grad, soft_quantize_weights, QuantParams, SoftRoundState,
};
use crate::tensor::Tensor;

/// Selects the default rounding-loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    /// Dense residual networks.
    ResNet,
    /// Networks built from depthwise-separable blocks.
    MobileNet,
}

impl ModelFamily {
    pub fn round_loss_weight(&self) -> f64 {
        match self {
            Self::ResNet => 0.01,
            Self::MobileNet => 0.1,
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Self::ResNet),
            "mobilenet" => Ok(Self::MobileNet),
            _ => Err(Error::InvalidArgument(format!("unknown model family `{s}` (resnet|mobilenet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub iterations: usize,
    /// Weight of the rounding regularizer relative to the reconstruction term.
    pub round_loss_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_batches: usize,
    /// Probability that an activation element keeps full precision.
    pub qdrop_prob: f64,
    pub seed: u64,
    /// Activation bit-width; `None` leaves activations in full precision.
    pub act_bits: Option<u32>,
    /// 8-bit weights for the first and last layer and 8-bit input activations.
    pub relax_first_last: bool,
    pub granularity: Granularity,
    pub beta_start: f64,
    pub beta_end: f64,
    pub trajectory_every: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            round_loss_weight: ModelFamily::ResNet.round_loss_weight(),
            learning_rate: 1e-3,
            batch_size: 32,
            num_batches: 16,
            qdrop_prob: 0.0,
            seed: 0,
            act_bits: Some(4),
            relax_first_last: false,
            granularity: Granularity::Block,
            beta_start: 20.0,
            beta_end: 2.0,
            trajectory_every: 100,
        }
    }
}

impl ReconConfig {
    pub fn for_family(family: ModelFamily) -> Self {
        Self {
            round_loss_weight: family.round_loss_weight(),
            ..Self::default()
        }
    }

    /// Layer-wise reconstruction units.
    pub fn adaround(self) -> Self {
        Self {
            granularity: Granularity::Layer,
            ..self
        }
    }

    /// Block-wise reconstruction units.
    pub fn brecq(self) -> Self {
        Self {
            granularity: Granularity::Block,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(0.0..=1.0).contains(&self.qdrop_prob) {
            return bad("qdrop probability must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.num_batches == 0 {
            return bad("batch size and batch count must be positive");
        }
        if !(self.round_loss_weight >= 0.0 && self.round_loss_weight.is_finite()) {
            return bad("rounding loss weight must be non-negative");
        }
        if !(self.beta_start > 0.0 && self.beta_end > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.trajectory_every == 0 {
            return bad("trajectory interval must be positive");
        }
        if let Some(b) = self.act_bits {
            if !(2..=16).contains(&b) {
                return bad("activation bit-width outside 2..=16");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub n_layers: usize,
    pub has_residual: bool,
    /// Loss over the calibration set with nearest-rounded weights.
    pub initial_loss: f64,
    /// Loss over the calibration set with the learned hard rounding.
    pub final_loss: f64,
    /// Fraction of `h(V)` within 1e-3 of 0 or 1 before hard rounding.
    pub h_saturation_fraction: f64,
    /// Mini-batch reconstruction loss every `trajectory_every` iterations.
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub granularity: Granularity,
    /// Number of modules before merging.
    pub base_modules: usize,
    pub scheme: GranularityScheme,
    pub config: ReconConfig,
    pub modules: Vec<ModuleReport>,
}

impl ReconstructionReport {
    pub fn final_losses(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.final_loss).collect()
    }

    /// Final loss of the last module, i.e. the error at the model output.
    pub fn final_loss(&self) -> f64 {
        self.modules.last().map_or(0.0, |m| m.final_loss)
    }

    /// Largest final loss among all modules but the last (0 with one module).
    pub fn max_prev_loss(&self) -> f64 {
        let n = self.modules.len();
        self.modules[..n.saturating_sub(1)]
            .iter()
            .fold(0.0, |m, r| m.max(r.final_loss))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Trajectory CSV with columns `module_index,iter,loss`.
    pub fn write_trajectory_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["module_index", "iter", "loss"])?;
        for m in &self.modules {
            for p in &m.trajectory {
                w.write_record([m.index.to_string(), p.iter.to_string(), format!("{:.16e}", p.loss)])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// A module together with everything needed to evaluate its quantized form.
#[derive(Debug, Clone, Copy)]
pub struct ModuleProblem<'a> {
    pub module: &'a ModuleSpec,
    pub layers: &'a [Layer],
    pub weight_quant: &'a [QuantParams],
    pub act_quant: &'a [Option<QuantParams>],
}

impl<'a> ModuleProblem<'a> {
    fn check(&self) -> Result<()> {
        let n = self.module.n_layers();
        if self.layers.len() != n || self.weight_quant.len() != n || self.act_quant.len() != n {
            return Err(Error::shape(
                format!("per-layer inputs of module {}..{}", self.module.start, self.module.end),
                n,
                format!(
                    "{} layers, {} weight and {} activation quantizers",
                    self.layers.len(),
                    self.weight_quant.len(),
                    self.act_quant.len()
                ),
            ));
        }
        Ok(())
    }

    fn fp_params(&self) -> Vec<LayerParams<'a>> {
        self.layers.iter().map(Layer::params).collect()
    }

    fn with_weights<'b>(&'b self, weights: &'b [Tensor]) -> Vec<LayerParams<'b>> {
        self.layers
            .iter()
            .zip(weights)
            .map(|(l, w)| LayerParams {
                spec: &l.spec,
                weights: w,
                bias: &l.bias,
            })
            .collect()
    }

    /// Full-precision module output.
    pub fn target(&self, fp_input: &ModuleInput) -> Result<Tensor> {
        module_forward(self.module, &self.fp_params(), fp_input, None)
    }

    /// Output with the given (already quantized) weights and nearest
    /// activation quantization.
    pub fn quantized_output(&self, weights: &[Tensor], q_input: &ModuleInput) -> Result<Tensor> {
        let quant = ModuleQuant {
            weights: vec![None; weights.len()],
            activations: self.act_quant.to_vec(),
        };
        module_forward(self.module, &self.with_weights(weights), q_input, Some(&quant))
    }

    pub fn nearest_weights(&self) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .zip(self.weight_quant)
            .map(|(l, q)| fake_quantize(&l.weights, q))
            .collect()
    }

    pub fn soft_weights(&self, soft: &[SoftRoundState]) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .zip(self.weight_quant)
            .zip(soft)
            .map(|((l, q), s)| soft_quantize_weights(&l.weights, q, s))
            .collect()
    }

    pub fn hard_weights(&self, soft: &[SoftRoundState]) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .zip(self.weight_quant)
            .zip(soft)
            .map(|((l, q), s)| hard_quantize_weights(&l.weights, q, s))
            .collect()
    }

    pub fn init_soft(&self) -> Result<Vec<SoftRoundState>> {
        self.layers
            .iter()
            .zip(self.weight_quant)
            .map(|(l, q)| SoftRoundState::from_weights(&l.weights, q))
            .collect()
    }

    /// Reconstruction loss against `target` and its gradient with respect to
    /// every layer's rounding variables.
    ///
    /// `drop` is the probability that an activation element bypasses its
    /// quantizer; gradients pass straight through unclamped quantizers.
    fn loss_and_grads(
        &self,
        soft: &[SoftRoundState],
        target: &Tensor,
        q_input: &ModuleInput,
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let weights = self.soft_weights(soft)?;
        let layers = self.with_weights(&weights);
        let mut err = None;
        let (keep_fp, mut rng) = match drop {
            Some((p, rng)) => (p, Some(rng)),
            None => (0.0, None),
        };
        let act_quant = self.act_quant;
        let mut act = |k: usize, x: &Tensor| -> Option<(Tensor, Vec<bool>)> {
            let q = act_quant[k].as_ref()?;
            if keep_fp >= 1.0 {
                return None;
            }
            let (mut xq, mut mask) = match fake_quantize_masked(x, q) {
                Ok(r) => r,
                Err(e) => {
                    err = Some(e);
                    return None;
                }
            };
            if keep_fp > 0.0 {
                if let Some(rng) = rng.as_deref_mut() {
                    for ((v, m), &orig) in xq.data_mut().iter_mut().zip(mask.iter_mut()).zip(x.data()) {
                        if rng.random::<f64>() < keep_fp {
                            *v = orig;
                            *m = true;
                        }
                    }
                }
            }
            Some((xq, mask))
        };
        let trace = forward_traced(self.module, &layers, q_input, &mut act)?;
        if let Some(e) = err {
            return Err(e);
        }
        let loss = trace.output.batch_mean_sq_dist(target)?;
        let batch = target.outer() as f64;
        let grad_out = trace.output.zip_map(target, |o, t| 2.0 * (o - t) / batch)?;
        let grads = backward_traced(self.module, &layers, &trace, &grad_out)?;
        let grad_v = self
            .layers
            .iter()
            .zip(self.weight_quant)
            .zip(soft)
            .zip(&grads.weights)
            .map(|(((l, q), s), g)| soft_quantize_grad(&l.weights, q, s, g))
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, grad_v))
    }
}

/// Batch-mean squared Frobenius distance between the full-precision module
/// on `fp_input` and the soft-quantized module on `q_input`, with gradients
/// with respect to each layer's `V`. Activation quantizers apply with a
/// straight-through gradient.
pub fn reconstruction_loss(
    problem: &ModuleProblem<'_>,
    soft: &[SoftRoundState],
    fp_input: &ModuleInput,
    q_input: &ModuleInput,
) -> Result<(f64, Vec<Tensor>)> {
    problem.check()?;
    let target = problem.target(fp_input)?;
    problem.loss_and_grads(soft, &target, q_input, None)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [SoftRoundState], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (x, &gj)) in p.v.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gj;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gj * gj;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn gather_input(input: &ModuleInput, rows: &[usize]) -> ModuleInput {
    ModuleInput {
        main: input.main.gather_outer(rows),
        skips: input.skips.iter().map(|(&k, t)| (k, t.gather_outer(rows))).collect(),
    }
}

/// Result of reconstructing one module.
#[derive(Debug, Clone)]
pub struct ModuleOutcome {
    pub report: ModuleReport,
    /// Hard-rounded, dequantized weights per layer.
    pub weights: Vec<Tensor>,
}

/// Optimizes the rounding of one module and snaps it to the grid.
pub fn reconstruct_module(
    index: usize,
    problem: &ModuleProblem<'_>,
    fp_input: &ModuleInput,
    q_input: &ModuleInput,
    cfg: &ReconConfig,
) -> Result<ModuleOutcome> {
    problem.check()?;
    cfg.validate()?;
    let m = problem.module;
    let target = problem.target(fp_input)?;
    let n = target.outer();
    if q_input.main.outer() != n {
        return Err(Error::shape("quantized module input batch", n, q_input.main.outer()));
    }
    let batch = cfg.batch_size.min(n);
    let initial_loss = problem
        .quantized_output(&problem.nearest_weights()?, q_input)?
        .batch_mean_sq_dist(&target)?;

    let mut soft = problem.init_soft()?;
    let mut adam = Adam::new(&soft.iter().map(|s| s.v.len()).collect::<Vec<_>>(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(m.start as u64);
    let mut trajectory = Vec::with_capacity(cfg.iterations / cfg.trajectory_every + 1);

    for it in 0..cfg.iterations {
        let beta = anneal_temperature(it, cfg.iterations, cfg.beta_start, cfg.beta_end);
        let mut rows = sample(&mut rng, n, batch).into_vec();
        rows.sort_unstable();
        let xb = gather_input(q_input, &rows);
        let tb = target.gather_outer(&rows);
        let drop = (cfg.qdrop_prob > 0.0).then_some((cfg.qdrop_prob, &mut rng));
        let (loss, mut grads) = problem.loss_and_grads(&soft, &tb, &xb, drop)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                module: index,
                start: m.start,
                end: m.end,
                iter: it,
            });
        }
        if it % cfg.trajectory_every == 0 {
            trajectory.push(TrajectoryPoint { iter: it, loss });
        }
        if cfg.round_loss_weight > 0.0 {
            for (s, g) in soft.iter_mut().zip(grads.iter_mut()) {
                s.beta = beta;
                let (_, rg) = rounding_regularizer(s);
                for (a, b) in g.data_mut().iter_mut().zip(rg.data()) {
                    *a += cfg.round_loss_weight * b;
                }
            }
        }
        adam.step(&mut soft, &grads);
    }

    let total: usize = soft.iter().map(|s| s.v.len()).sum();
    let saturated: f64 = soft
        .iter()
        .map(|s| s.saturation_fraction(1e-3) * s.v.len() as f64)
        .sum();
    let weights = problem.hard_weights(&soft)?;
    let final_loss = problem.quantized_output(&weights, q_input)?.batch_mean_sq_dist(&target)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            module: index,
            start: m.start,
            end: m.end,
            iter: cfg.iterations,
        });
    }
    Ok(ModuleOutcome {
        report: ModuleReport {
            index,
            start: m.start,
            end: m.end,
            n_layers: m.n_layers(),
            has_residual: m.has_residual(),
            initial_loss,
            final_loss,
            h_saturation_fraction: saturated / total as f64,
            trajectory,
        },
        weights,
    })
}

/// Input of every layer when running the full-precision model on `x`.
pub fn fp_layer_inputs(model: &ModelGraph, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut inputs = Vec::with_capacity(model.num_layers());
    let mut cur = ModuleInput::from(x.clone());
    for m in build_modules(model, Granularity::Block) {
        let layers: Vec<LayerParams<'_>> = model.layers[m.layers()].iter().map(Layer::params).collect();
        let mut identity = |_: usize, _: &Tensor| None;
        let trace = forward_traced(&m, &layers, &cur, &mut identity)?;
        for k in 0..m.n_layers() {
            inputs.push(trace.layer_input(k).clone());
        }
        cur = ModuleInput::from(trace.into_output());
    }
    Ok(inputs)
}

/// Per-layer quantizers: per-channel symmetric weights at the layer's
/// bit-width, per-tensor asymmetric activations calibrated on the
/// full-precision input of each layer.
pub fn calibrate_quantizers(
    model: &ModelGraph,
    calib: &Tensor,
    cfg: &ReconConfig,
) -> Result<(Vec<QuantParams>, Vec<Option<QuantParams>>)> {
    let last = model.num_layers() - 1;
    let weight_quant = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let bits = if cfg.relax_first_last && (i == 0 || i == last) {
                8
            } else {
                l.spec.bitwidth_weights
            };
            calibrate_scale(&l.weights, bits, true, true)
        })
        .collect::<Result<Vec<_>>>()?;
    let act_quant = match cfg.act_bits {
        None => vec![None; model.num_layers()],
        Some(bits) => fp_layer_inputs(model, calib)?
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let b = if cfg.relax_first_last && i == 0 { 8 } else { bits };
                match calibrate_scale(x, b, false, false) {
                    Ok(q) => Ok(Some(q)),
                    Err(Error::DegenerateRange) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok((weight_quant, act_quant))
}

/// A model whose weights have been replaced by their quantized values,
/// together with its activation quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: ModelGraph,
    pub weight_quant: Vec<QuantParams>,
    pub act_quant: Vec<Option<QuantParams>>,
}

impl QuantizedModel {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.forward(x, Some(&self.act_quant))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: ReconstructionReport,
    pub quantized: QuantizedModel,
}

/// Reconstructs the (merged) modules of `model` in order. Each module sees
/// the full-precision chain's outputs as its reference input and the
/// quantized chain's outputs as its actual input.
pub fn run_pipeline(
    model: &ModelGraph,
    scheme: &GranularityScheme,
    calib: &CalibrationSet,
    cfg: &ReconConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    model.validate()?;
    let base = build_modules(model, cfg.granularity);
    let modules = apply_scheme(&base, scheme)?;
    let x = &calib.samples;
    let (weight_quant, act_quant) = calibrate_quantizers(model, x, cfg)?;

    let sources: BTreeSet<usize> = model.residual_spans().iter().map(|s| s.from).collect();
    let mut fp_skips: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut q_skips: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut fp_x = x.clone();
    let mut q_x = x.clone();
    let mut quantized = model.clone();
    let mut reports = Vec::with_capacity(modules.len());

    for (index, m) in modules.iter().enumerate() {
        let pick = |skips: &BTreeMap<usize, Tensor>| -> Result<BTreeMap<usize, Tensor>> {
            m.external_sources()
                .map(|s| {
                    skips
                        .get(&s)
                        .cloned()
                        .map(|t| (s, t))
                        .ok_or_else(|| Error::InvalidArgument(format!("residual source {s} not cached")))
                })
                .collect()
        };
        let fp_in = ModuleInput {
            main: fp_x,
            skips: pick(&fp_skips)?,
        };
        let q_in = ModuleInput {
            main: q_x,
            skips: pick(&q_skips)?,
        };
        let problem = ModuleProblem {
            module: m,
            layers: &model.layers[m.layers()],
            weight_quant: &weight_quant[m.layers()],
            act_quant: &act_quant[m.layers()],
        };
        let outcome = reconstruct_module(index, &problem, &fp_in, &q_in, cfg)?;
        log::debug!(
            "module {index} (layers {}..{}): loss {:.6e} -> {:.6e}",
            m.start,
            m.end,
            outcome.report.initial_loss,
            outcome.report.final_loss
        );

        let fp_layers = problem.fp_params();
        let mut identity = |_: usize, _: &Tensor| None;
        let fp_trace = forward_traced(m, &fp_layers, &fp_in, &mut identity)?;
        let q_layers = problem.with_weights(&outcome.weights);
        let mut err = None;
        let mut act = |k: usize, t: &Tensor| {
            let q = problem.act_quant[k].as_ref()?;
            fake_quantize_masked(t, q).map_err(|e| err = Some(e)).ok()
        };
        let q_trace = forward_traced(m, &q_layers, &q_in, &mut act)?;
        if let Some(e) = err {
            return Err(e);
        }
        for s in sources.range(m.start..m.end) {
            fp_skips.insert(*s, fp_trace.layer_input(s - m.start).clone());
            q_skips.insert(*s, q_trace.layer_input(s - m.start).clone());
        }
        fp_x = fp_trace.into_output();
        q_x = q_trace.into_output();

        for (layer, w) in quantized.layers[m.layers()].iter_mut().zip(outcome.weights) {
            layer.weights = w;
        }
        reports.push(outcome.report);
    }

    Ok(PipelineOutput {
        report: ReconstructionReport {
            granularity: cfg.granularity,
            base_modules: base.len(),
            scheme: scheme.clone(),
            config: cfg.clone(),
            modules: reports,
        },
        quantized: QuantizedModel {
            graph: quantized,
            weight_quant,
            act_quant,
        },
    })
}
