//! Choosing which adjacent modules to reconstruct jointly: rank the squared
//! capacity differences of neighbouring modules and merge the top `k`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capacity::{CapacityMetric, CapacityVector};
use crate::error::{Error, Result};
use crate::partition::{Granularity, GranularityScheme};

/// `(CM_l - CM_{l+1})^2` for the pair joining modules `l` and `l + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Selected pairs may not share a module, so merges never chain.
    DataFree,
    /// Plain top-k; adjacent selections merge into longer runs.
    DataDependent,
}

impl SelectionMode {
    /// ModCap is data-free, the loss metric is data-dependent.
    pub fn for_metric(metric: CapacityMetric) -> Self {
        match metric {
            CapacityMetric::ModCap => Self::DataFree,
            CapacityMetric::Loss => Self::DataDependent,
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data_free" | "data-free" => Ok(Self::DataFree),
            "data_dependent" | "data-dependent" => Ok(Self::DataDependent),
            _ => Err(Error::InvalidArgument(format!(
                "unknown selection mode `{s}` (data-free|data-dependent)"
            ))),
        }
    }
}

pub fn score_pairs(cm: &CapacityVector) -> Result<Vec<PairScore>> {
    if cm.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "scoring pairs needs at least 2 modules, got {}",
            cm.len()
        )));
    }
    Ok(cm
        .values
        .windows(2)
        .enumerate()
        .map(|(pair_index, w)| PairScore {
            pair_index,
            score: (w[0] - w[1]).powi(2),
        })
        .collect())
}

/// Pair indices by descending score, ties to the lower index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Selects up to `k` pairs by descending score (ties to the lowest index).
///
/// In data-free mode a pair is skipped when a neighbouring pair is already
/// selected; `k_achieved` then reports how many were actually taken.
pub fn select_topk(scores: &[PairScore], k: usize, mode: SelectionMode) -> Result<GranularityScheme> {
    if k > scores.len() {
        return Err(Error::OutOfRange(format!("k = {k} exceeds the {} module pairs", scores.len())));
    }
    let values: Vec<f64> = scores.iter().map(|p| p.score).collect();
    let mut mask = vec![false; values.len()];
    let mut taken = 0;
    for l in ranked(&values) {
        if taken == k {
            break;
        }
        if mode == SelectionMode::DataFree {
            let left = l > 0 && mask[l - 1];
            let right = l + 1 < mask.len() && mask[l + 1];
            if left || right {
                continue;
            }
        }
        mask[l] = true;
        taken += 1;
    }
    Ok(GranularityScheme {
        mask,
        k_requested: k,
        k_achieved: taken,
    })
}

/// `-sum(score_l * m_l) + lambda * (sum(m) - k)^2`, to be minimized: the
/// negated selection term rewards covering large capacity gaps while the
/// penalty holds the number of merges at `k`.
pub fn objective_value(mask: &[bool], scores: &[PairScore], k: usize, lambda: f64) -> Result<f64> {
    if mask.len() != scores.len() {
        return Err(Error::MaskLength {
            expected: scores.len(),
            actual: mask.len(),
        });
    }
    let selection: f64 = mask.iter().zip(scores).filter(|(m, _)| **m).map(|(_, p)| p.score).sum();
    let count = mask.iter().filter(|&&m| m).count() as f64;
    Ok(-selection + lambda * (count - k as f64).powi(2))
}

/// `max(score) * L`, large enough that the cardinality penalty dominates.
pub fn default_lambda(scores: &[PairScore]) -> f64 {
    let max = scores.iter().fold(0.0f64, |m, p| m.max(p.score));
    max * (scores.len() + 1) as f64
}

/// Minimum of [`objective_value`] over all `2^len` masks, with the first
/// minimizing mask in enumeration order.
pub fn exhaustive_minimum(scores: &[PairScore], k: usize, lambda: f64) -> Result<(Vec<bool>, f64)> {
    let n = scores.len();
    if n > 24 {
        return Err(Error::OutOfRange(format!("exhaustive search over 2^{n} masks")));
    }
    let mut best = (Vec::new(), f64::INFINITY);
    let mut mask = vec![false; n];
    for bits in 0u32..(1u32 << n) {
        for (i, m) in mask.iter_mut().enumerate() {
            *m = bits >> i & 1 == 1;
        }
        let v = objective_value(&mask, scores, k, lambda)?;
        if v < best.1 {
            best = (mask.clone(), v);
        }
    }
    Ok(best)
}

/// The plan file written by `plan` and read by `quantize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub mask: Vec<u8>,
    pub k: usize,
    pub metric: CapacityMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_achieved: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SelectionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// [`objective_value`] of the mask at `lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

impl Plan {
    pub fn new(scheme: &GranularityScheme, metric: CapacityMetric) -> Self {
        Self {
            mask: scheme.mask.iter().map(|&m| m as u8).collect(),
            k: scheme.k_requested,
            metric,
            k_achieved: Some(scheme.k_achieved),
            mode: None,
            granularity: None,
            capacity: None,
            pair_scores: None,
            lambda: None,
            objective: None,
        }
    }

    pub fn scheme(&self) -> Result<GranularityScheme> {
        let mask = self
            .mask
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::InvalidArgument(format!("plan mask entry {b} is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let achieved = mask.iter().filter(|&&m| m).count();
        Ok(GranularityScheme {
            mask,
            k_requested: self.k,
            k_achieved: self.k_achieved.unwrap_or(achieved),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(v: &[f64]) -> CapacityVector {
        CapacityVector {
            values: v.to_vec(),
            metric: CapacityMetric::ModCap,
        }
    }

    fn ps(v: &[f64]) -> Vec<PairScore> {
        v.iter()
            .enumerate()
            .map(|(pair_index, &score)| PairScore { pair_index, score })
            .collect()
    }

    fn bits(s: &GranularityScheme) -> Vec<u8> {
        s.mask.iter().map(|&m| m as u8).collect()
    }

    #[test]
    fn pair_scores() {
        let s: Vec<f64> = score_pairs(&cm(&[10., 4., 9., 9., 1.])).unwrap().iter().map(|p| p.score).collect();
        assert_eq!(s, [36., 25., 0., 64.]);
        assert!(score_pairs(&cm(&[3.; 4])).unwrap().iter().all(|p| p.score == 0.0));
        assert_eq!(score_pairs(&cm(&[1., 2.])).unwrap().len(), 1);
        assert!(score_pairs(&cm(&[1.])).is_err());
    }

    #[test]
    fn topk_examples() {
        for mode in [SelectionMode::DataFree, SelectionMode::DataDependent] {
            assert_eq!(bits(&select_topk(&ps(&[36., 25., 0., 64.]), 2, mode).unwrap()), [1, 0, 0, 1]);
        }
        let free = select_topk(&ps(&[16., 16.]), 2, SelectionMode::DataFree).unwrap();
        assert_eq!(bits(&free), [1, 0]);
        assert_eq!((free.k_requested, free.k_achieved), (2, 1));
        let dep = select_topk(&ps(&[16., 16.]), 2, SelectionMode::DataDependent).unwrap();
        assert_eq!(bits(&dep), [1, 1]);
        assert!(select_topk(&ps(&[1.]), 2, SelectionMode::DataFree).is_err());
    }

    #[test]
    fn objective_examples() {
        let s = ps(&[36., 25., 0., 64.]);
        assert_eq!(objective_value(&[false; 4], &s[..], 2, 1.0).unwrap(), 4.0);
        let (best, _) = exhaustive_minimum(&s, 2, 0.0).unwrap();
        assert_eq!(best, [true, true, false, true]);
        let (best, v) = exhaustive_minimum(&s, 2, default_lambda(&s)).unwrap();
        assert_eq!(best, [true, false, false, true]);
        assert_eq!(v, -100.0);
    }

    #[test]
    fn plan_round_trip() {
        let scheme = select_topk(&ps(&[36., 25., 0., 64.]), 2, SelectionMode::DataFree).unwrap();
        let plan = Plan::new(&scheme, CapacityMetric::ModCap);
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"metric\":\"modcap\""));
        let back: Plan = serde_json::from_str(&json).unwrap();
        assert_eq!(back.scheme().unwrap(), scheme);
        let minimal: Plan = serde_json::from_str(r#"{"mask":[0,1],"k":1,"metric":"loss"}"#).unwrap();
        assert_eq!(minimal.scheme().unwrap().mask, [false, true]);
    }
}
