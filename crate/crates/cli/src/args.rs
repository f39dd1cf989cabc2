use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mrecg_core::model_io::Distribution;
use mrecg_core::{CapacityMetric, Granularity, ModelFamily, SelectionMode};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mrecg", version, about = "Post-training quantization with mixed reconstruction granularity")]
pub struct Cli {
    /// JSON object of flag values (keys are long flag names with `_` or `-`);
    /// flags given on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic residual model and calibration data
    Synth(SynthArgs),
    /// Choose which adjacent modules to reconstruct jointly
    Plan(PlanArgs),
    /// Quantize a model by module-wise reconstruction
    Quantize(QuantizeArgs),
    /// Diagnostic studies
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Loss median and dispersion across calibration batch sizes
    Batch(BatchArgs),
    /// Randomly sampled merge schemes: largest earlier loss vs final loss
    Schemes(SchemesArgs),
    /// Oscillation scores of existing reports
    Oscillation(OscillationArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Output directory for model.json, model.bin and calib.bin
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    pub blocks: u64,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Index of the depthwise bottleneck block
    #[arg(long)]
    pub bottleneck: Option<usize>,
    /// Input height and width
    #[arg(long, default_value_t = 6)]
    pub hw: usize,
    #[arg(long, default_value_t = 4)]
    pub wbits: u32,
    #[arg(long, default_value_t = 32)]
    pub calib_batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub calib_batches: usize,
    #[arg(long, default_value = "gaussian")]
    pub distribution: Distribution,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Plan file to write; its manifest goes next to it
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "modcap")]
    pub metric: CapacityMetric,
    /// Number of adjacent module pairs to merge
    #[arg(long)]
    pub k: usize,
    /// Pair selection rule [default: data-free for modcap, data-dependent for loss]
    #[arg(long)]
    pub mode: Option<SelectionMode>,
    /// Weight bit-width assumed for every layer [default: as stored in the model]
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, default_value = "block")]
    pub granularity: Granularity,
    /// Zero-mask reconstruction report supplying per-module losses for `--metric loss`
    #[arg(long)]
    pub baseline_report: Option<PathBuf>,
    /// Cardinality penalty weight [default: max pair score times number of pairs plus one]
    #[arg(long)]
    pub lambda: Option<f64>,
}

/// Reconstruction hyper-parameters shared by `quantize` and the studies.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ReconArgs {
    /// Optimization steps per module
    #[arg(long, default_value_t = 20000)]
    pub iters: usize,
    #[arg(long, default_value_t = 4)]
    pub wbits: u32,
    #[arg(long, default_value_t = 4)]
    pub abits: u32,
    /// Keep full-precision activations instead of quantizing them
    #[arg(long)]
    pub fp_activations: bool,
    /// Probability that an activation element skips quantization during optimization
    #[arg(long, default_value_t = 0.0)]
    pub qdrop: f64,
    /// Selects the rounding-loss weight (resnet 0.01, mobilenet 0.1)
    #[arg(long, default_value = "resnet")]
    pub model_family: ModelFamily,
    /// Overrides the family's rounding-loss weight
    #[arg(long)]
    pub round_weight: Option<f64>,
    #[arg(long, default_value = "block")]
    pub granularity: Granularity,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub num_batches: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Quantize the first and last layer to 8 bits
    #[arg(long)]
    pub relax_first_last: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Output directory for report.json and trajectory.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Merge plan; without one every module is reconstructed on its own
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub recon: ReconArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct BatchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ascending batch sizes
    #[arg(long, value_delimiter = ',', default_value = "8,32,128,512")]
    pub sizes: Vec<usize>,
    /// Runs per size
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Held-out samples for measuring the final loss
    #[arg(long, default_value_t = 256)]
    pub eval_samples: usize,
    #[arg(long, default_value = "gaussian")]
    pub distribution: Distribution,
    #[command(flatten)]
    #[serde(flatten)]
    pub recon: ReconArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SchemesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sampled schemes in addition to the zero-mask baseline
    #[arg(long, default_value_t = 30)]
    pub samples: usize,
    /// Merged pairs per sample, `N` or `LO..HI` (inclusive)
    #[arg(long, default_value = "1..3", value_parser = parse_k_range)]
    pub k: KRange,
    #[command(flatten)]
    #[serde(flatten)]
    pub recon: ReconArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct OscillationArgs {
    /// Reconstruction report (repeatable)
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KRange {
    pub lo: usize,
    pub hi: usize,
}

fn parse_k_range(s: &str) -> Result<KRange, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => {
            let k = num(s)?;
            (k, k)
        }
    };
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok(KRange { lo, hi })
}
