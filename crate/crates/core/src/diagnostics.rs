//! Loss-oscillation measures, the random-scheme study and the calibration
//! batch-size study, with their CSV encodings.

use std::io::{Read, Write};
use std::ops::RangeInclusive;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{generate_calibration, Distribution, ModelGraph};
use crate::partition::{build_modules, GranularityScheme};
use crate::recon::{run_pipeline, ReconConfig, ReconstructionReport};
use crate::tensor::Tensor;
use crate::CalibrationSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationSummary {
    /// Total downward variation `sum(max(0, L_i - L_{i+1}))`.
    pub score: f64,
    pub num_drops: usize,
    pub max_loss: f64,
    pub final_loss: f64,
}

pub fn oscillation_score(final_losses: &[f64]) -> Result<OscillationSummary> {
    let last = *final_losses
        .last()
        .ok_or_else(|| Error::InvalidArgument("oscillation score of an empty loss sequence".into()))?;
    let mut score = 0.0;
    let mut num_drops = 0;
    for w in final_losses.windows(2) {
        if w[1] < w[0] {
            score += w[0] - w[1];
            num_drops += 1;
        }
    }
    Ok(OscillationSummary {
        score,
        num_drops,
        max_loss: final_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_loss: last,
    })
}

impl OscillationSummary {
    pub fn of_report(report: &ReconstructionReport) -> Result<Self> {
        oscillation_score(&report.final_losses())
    }
}

/// One row of `oscillation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationRow {
    pub label: String,
    pub score: f64,
    pub num_drops: usize,
    pub max_loss: f64,
    pub final_loss: f64,
}

impl OscillationRow {
    pub fn new(label: impl Into<String>, s: &OscillationSummary) -> Self {
        Self {
            label: label.into(),
            score: s.score,
            num_drops: s.num_drops,
            max_loss: s.max_loss,
            final_loss: s.final_loss,
        }
    }
}

/// One row of `scheme_samples.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSample {
    pub index: usize,
    /// Merge mask as a string of `0`/`1`.
    pub mask: String,
    pub k: usize,
    pub max_prev_loss: f64,
    pub final_loss: f64,
    pub oscillation_score: f64,
}

/// Masks for [`sample_schemes`]: the zero mask, then `num_samples` masks
/// with `k` drawn uniformly from `k_range` and the `k` set pairs drawn
/// uniformly among all pairs.
pub fn sample_masks(num_pairs: usize, num_samples: usize, k_range: RangeInclusive<usize>, seed: u64) -> Result<Vec<GranularityScheme>> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("scheme sampling needs at least one sample".into()));
    }
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo > hi || hi > num_pairs {
        return Err(Error::OutOfRange(format!(
            "k range {lo}..={hi} does not fit the {num_pairs} module pairs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![GranularityScheme::zeros(num_pairs + 1)];
    for _ in 0..num_samples {
        let k = rng.random_range(lo..=hi);
        let mut mask = vec![false; num_pairs];
        for i in index::sample(&mut rng, num_pairs, k) {
            mask[i] = true;
        }
        out.push(GranularityScheme::from_mask(mask));
    }
    Ok(out)
}

/// Runs the pipeline once per sampled scheme (row 0 is the zero-mask
/// baseline) and records the largest loss before the last module and the
/// final loss.
pub fn sample_schemes(
    model: &ModelGraph,
    calib: &CalibrationSet,
    num_samples: usize,
    k_range: RangeInclusive<usize>,
    seed: u64,
    cfg: &ReconConfig,
) -> Result<Vec<SchemeSample>> {
    let num_pairs = build_modules(model, cfg.granularity).len().saturating_sub(1);
    let schemes = sample_masks(num_pairs, num_samples, k_range, seed)?;
    schemes
        .par_iter()
        .enumerate()
        .map(|(index, scheme)| {
            let report = run_pipeline(model, scheme, calib, cfg)?.report;
            Ok(SchemeSample {
                index,
                mask: scheme.mask_string(),
                k: scheme.selected(),
                max_prev_loss: report.max_prev_loss(),
                final_loss: report.final_loss(),
                oscillation_score: OscillationSummary::of_report(&report)?.score,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    median(&values.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation. NaN when either side is constant or the
/// lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    pearson(&ranks(a), &ranks(b))
}

/// One row of `batch_study.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStudyRow {
    pub size: usize,
    pub seeds: usize,
    pub median_final_loss: f64,
    pub loss_mad: f64,
}

/// Settings of [`batch_size_study`] besides the reconstruction config.
#[derive(Debug, Clone)]
pub struct BatchStudy {
    pub sizes: Vec<usize>,
    pub seeds_per_size: usize,
    pub distribution: Distribution,
    /// Held-out inputs on which the final loss is measured.
    pub eval: Tensor,
}

impl BatchStudy {
    pub fn calibration_seed(base: u64, size: usize, run: usize) -> u64 {
        base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((size as u64) << 32) ^ run as u64
    }
}

/// Output error `E||f(x) - f_q(x)||^2` of a quantized model on `eval`.
pub fn output_loss(model: &ModelGraph, quantized: &crate::recon::QuantizedModel, eval: &Tensor) -> Result<f64> {
    let fp = model.forward(eval, None)?;
    quantized.forward(eval)?.batch_mean_sq_dist(&fp)
}

/// For every size, reconstructs `seeds_per_size` times, each with a fresh
/// calibration set of `size * cfg.num_batches` samples and batch size
/// `size`, and summarizes the held-out output loss by median and MAD.
pub fn batch_size_study(model: &ModelGraph, study: &BatchStudy, cfg: &ReconConfig) -> Result<Vec<BatchStudyRow>> {
    if study.sizes.is_empty() || study.seeds_per_size == 0 {
        return Err(Error::InvalidArgument("batch study needs at least one size and one seed".into()));
    }
    if study.sizes.windows(2).any(|w| w[0] >= w[1]) || study.sizes[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch sizes must be positive and strictly ascending, got {:?}",
            study.sizes
        )));
    }
    let runs: Vec<(usize, usize)> = study
        .sizes
        .iter()
        .flat_map(|&s| (0..study.seeds_per_size).map(move |r| (s, r)))
        .collect();
    let losses = runs
        .par_iter()
        .map(|&(size, run)| {
            let calib = generate_calibration(
                model.input_shape,
                size,
                cfg.num_batches,
                study.distribution,
                BatchStudy::calibration_seed(cfg.seed, size, run),
            )?;
            let run_cfg = ReconConfig {
                batch_size: size,
                seed: cfg.seed.wrapping_add(run as u64),
                ..cfg.clone()
            };
            let out = run_pipeline(model, &GranularityScheme::zeros(build_modules(model, cfg.granularity).len()), &calib, &run_cfg)?;
            output_loss(model, &out.quantized, &study.eval)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(study
        .sizes
        .iter()
        .zip(losses.chunks(study.seeds_per_size))
        .map(|(&size, l)| BatchStudyRow {
            size,
            seeds: l.len(),
            median_final_loss: median(l),
            loss_mad: mad(l),
        })
        .collect())
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::Csv(e.into()))
}

/// `label,score,num_drops,max_loss,final_loss`
pub fn write_oscillation_csv<W: Write>(rows: &[OscillationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "score", "num_drops", "max_loss", "final_loss"])?;
    for r in rows {
        w.write_record([r.label.clone(), real(r.score), r.num_drops.to_string(), real(r.max_loss), real(r.final_loss)])?;
    }
    finish(w)
}

/// `index,mask,k,max_prev_loss,final_loss,oscillation_score`
pub fn write_scheme_samples_csv<W: Write>(rows: &[SchemeSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "mask", "k", "max_prev_loss", "final_loss", "oscillation_score"])?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.mask.clone(),
            r.k.to_string(),
            real(r.max_prev_loss),
            real(r.final_loss),
            real(r.oscillation_score),
        ])?;
    }
    finish(w)
}

/// `size,seeds,median_final_loss,loss_mad`
pub fn write_batch_study_csv<W: Write>(rows: &[BatchStudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["size", "seeds", "median_final_loss", "loss_mad"])?;
    for r in rows {
        w.write_record([r.size.to_string(), r.seeds.to_string(), real(r.median_final_loss), real(r.loss_mad)])?;
    }
    finish(w)
}

/// Reads any of the tables above back from CSV.
pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
