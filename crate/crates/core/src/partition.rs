//! Reconstruction modules: layer- or block-granularity partitions of a
//! model, topological homogeneity, and merging of adjacent modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::ModelGraph;

/// The input of layer `from` is added to the pre-activation output of
/// layer `to` (absolute layer indices, `from <= to`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResidualSpan {
    pub from: usize,
    pub to: usize,
}

/// Layers `start..end` reconstructed jointly.
///
/// `residuals` holds every skip connection that closes inside the module.
/// A span whose source precedes `start` reads its operand from the module
/// input's skip map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub start: usize,
    pub end: usize,
    pub residuals: Vec<ResidualSpan>,
}

impl ModuleSpec {
    pub fn new(start: usize, end: usize, residuals: Vec<ResidualSpan>) -> Self {
        debug_assert!(start < end);
        Self { start, end, residuals }
    }

    pub fn n_layers(&self) -> usize {
        self.end - self.start
    }

    pub fn has_residual(&self) -> bool {
        !self.residuals.is_empty()
    }

    pub fn layers(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Residual sources that lie before the module.
    pub fn external_sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.residuals.iter().filter(|s| s.from < self.start).map(|s| s.from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Block,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "block" => Ok(Self::Block),
            _ => Err(Error::InvalidArgument(format!("unknown granularity `{s}` (layer|block)"))),
        }
    }
}

fn spans_closing_in(spans: &[ResidualSpan], start: usize, end: usize) -> Vec<ResidualSpan> {
    spans.iter().copied().filter(|s| (start..end).contains(&s.to)).collect()
}

/// One module per layer, or one per block.
pub fn build_modules(g: &ModelGraph, granularity: Granularity) -> Vec<ModuleSpec> {
    let spans = g.residual_spans();
    let ranges: Vec<(usize, usize)> = match granularity {
        Granularity::Layer => (0..g.num_layers()).map(|i| (i, i + 1)).collect(),
        Granularity::Block => g.blocks.iter().map(|b| (b.start, b.end)).collect(),
    };
    ranges
        .into_iter()
        .map(|(s, e)| ModuleSpec::new(s, e, spans_closing_in(&spans, s, e)))
        .collect()
}

/// Same layer count and, layer by layer, the same stride, grouping pattern
/// and activation, with the same skip structure. Kernel size and channel
/// counts may differ.
pub fn is_topologically_homogeneous(a: &ModuleSpec, b: &ModuleSpec, g: &ModelGraph) -> bool {
    if a.n_layers() != b.n_layers() || a.end > g.num_layers() || b.end > g.num_layers() {
        return false;
    }
    let layers_match = a.layers().zip(b.layers()).all(|(i, j)| {
        let (x, y) = (&g.layers[i].spec, &g.layers[j].spec);
        x.stride == y.stride
            && x.group_pattern() == y.group_pattern()
            && x.has_relu == y.has_relu
            && (x.relu6 && x.has_relu) == (y.relu6 && y.has_relu)
    });
    let relative = |m: &ModuleSpec| {
        let mut r: Vec<(isize, isize)> = m
            .residuals
            .iter()
            .map(|s| (s.from as isize - m.start as isize, s.to as isize - m.start as isize))
            .collect();
        r.sort_unstable();
        r
    };
    layers_match && relative(a) == relative(b)
}

/// Binary merge mask over adjacent module pairs: `mask[l]` joins modules
/// `l` and `l + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityScheme {
    pub mask: Vec<bool>,
    pub k_requested: usize,
    pub k_achieved: usize,
}

impl GranularityScheme {
    pub fn zeros(num_modules: usize) -> Self {
        Self {
            mask: vec![false; num_modules.saturating_sub(1)],
            k_requested: 0,
            k_achieved: 0,
        }
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let k = mask.iter().filter(|&&m| m).count();
        Self {
            mask,
            k_requested: k,
            k_achieved: k,
        }
    }

    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask as a string of `0`/`1`.
    pub fn mask_string(&self) -> String {
        self.mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }
}

/// Merges every maximal run of set mask bits into one module.
pub fn apply_scheme(modules: &[ModuleSpec], scheme: &GranularityScheme) -> Result<Vec<ModuleSpec>> {
    let expected = modules.len().saturating_sub(1);
    if scheme.mask.len() != expected {
        return Err(Error::MaskLength {
            expected,
            actual: scheme.mask.len(),
        });
    }
    let mut out: Vec<ModuleSpec> = Vec::with_capacity(modules.len());
    for (i, m) in modules.iter().enumerate() {
        let join = i > 0 && scheme.mask[i - 1];
        match out.last_mut() {
            Some(prev) if join => {
                if prev.end != m.start {
                    return Err(Error::InvalidArgument(format!(
                        "modules {}..{} and {}..{} are not contiguous",
                        prev.start, prev.end, m.start, m.end
                    )));
                }
                prev.end = m.end;
                prev.residuals.extend_from_slice(&m.residuals);
            }
            _ => out.push(m.clone()),
        }
    }
    for m in &mut out {
        m.residuals.sort_unstable();
        m.residuals.dedup();
    }
    Ok(out)
}

/// Contiguous, non-overlapping and covering `0..num_layers`.
pub fn is_valid_partition(modules: &[ModuleSpec], num_layers: usize) -> bool {
    let mut next = 0;
    for m in modules {
        if m.start != next || m.end <= m.start {
            return false;
        }
        next = m.end;
    }
    next == num_layers
}
