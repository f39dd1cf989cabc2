//! Module capacity metrics: data-free parameter/bit counting (ModCap) and
//! measured reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::ModelGraph;
use crate::partition::ModuleSpec;

/// Stride-2 capacity factor.
pub const DEFAULT_ALPHA: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityMetric {
    #[serde(rename = "modcap")]
    ModCap,
    Loss,
}

impl CapacityMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ModCap => "modcap",
            Self::Loss => "loss",
        }
    }
}

impl std::str::FromStr for CapacityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modcap" => Ok(Self::ModCap),
            "loss" => Ok(Self::Loss),
            _ => Err(Error::InvalidArgument(format!("unknown capacity metric `{s}` (modcap|loss)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityVector {
    pub values: Vec<f64>,
    pub metric: CapacityMetric,
}

impl CapacityVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `sum(params(W_i) * b_i * alpha_i)` over the module's layers, where
/// `alpha_i` is `alpha_stride2` for stride-2 layers and 1 otherwise. Biases
/// are not counted.
pub fn mod_cap(m: &ModuleSpec, g: &ModelGraph, alpha_stride2: f64) -> f64 {
    g.layers[m.layers()]
        .iter()
        .map(|l| {
            let alpha = if l.spec.stride == 2 { alpha_stride2 } else { 1.0 };
            l.spec.params() as f64 * l.spec.bitwidth_weights as f64 * alpha
        })
        .sum()
}

/// One capacity value per module. The loss metric takes the per-module
/// final losses of a baseline reconstruction over the same partition.
pub fn capacity_vector(
    modules: &[ModuleSpec],
    g: &ModelGraph,
    metric: CapacityMetric,
    baseline_losses: Option<&[f64]>,
) -> Result<CapacityVector> {
    let values = match metric {
        CapacityMetric::ModCap => modules.iter().map(|m| mod_cap(m, g, DEFAULT_ALPHA)).collect(),
        CapacityMetric::Loss => {
            let losses = baseline_losses.ok_or(Error::MissingReports)?;
            if losses.len() != modules.len() {
                return Err(Error::shape("baseline losses (one per module)", modules.len(), losses.len()));
            }
            if losses.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument("baseline losses must be finite and non-negative".into()));
            }
            losses.to_vec()
        }
    };
    Ok(CapacityVector { values, metric })
}
