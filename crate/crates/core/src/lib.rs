//! Post-training quantization with mixed reconstruction granularity.
//!
//! Small residual CNNs are quantized module by module with learnable soft
//! rounding. Adjacent modules whose capacities differ most are merged and
//! reconstructed jointly, which smooths the per-module loss sequence.

pub mod capacity;
pub mod diagnostics;
pub mod error;
pub mod model_io;
pub mod nn;
pub mod partition;
pub mod quant;
pub mod recon;
pub mod solver;
pub mod tensor;

pub use capacity::{capacity_vector, mod_cap, CapacityMetric, CapacityVector};
pub use diagnostics::{oscillation_score, OscillationSummary};
pub use error::{Error, Result};
pub use model_io::{CalibrationSet, ModelGraph};
pub use nn::LayerSpec;
pub use partition::{apply_scheme, build_modules, Granularity, GranularityScheme, ModuleSpec};
pub use quant::QuantParams;
pub use recon::{run_pipeline, ModelFamily, ReconConfig, ReconstructionReport};
pub use solver::{score_pairs, select_topk, PairScore, Plan, SelectionMode};
pub use tensor::Tensor;
