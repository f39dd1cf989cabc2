use std::fs;
use std::path::Path;

use mrecg_core::diagnostics::{
    batch_size_study, oscillation_score, sample_schemes, spearman, write_batch_study_csv, write_oscillation_csv,
    write_scheme_samples_csv, BatchStudy, BatchStudyRow, OscillationRow, SchemeSample,
};
use mrecg_core::model_io::{
    generate_calibration, generate_synthetic_model, load_calibration, load_model, save_calibration, save_model,
    SynthConfig,
};
use mrecg_core::solver::{default_lambda, objective_value};
use mrecg_core::{
    build_modules, capacity_vector, run_pipeline, score_pairs, select_topk, CapacityMetric, GranularityScheme,
    ModelGraph, Plan, ReconConfig, ReconstructionReport, SelectionMode,
};
use serde::Serialize;

use crate::args::{BatchArgs, OscillationArgs, PlanArgs, QuantizeArgs, ReconArgs, SchemesArgs, SynthArgs};
use crate::error::CliError;
use crate::manifest::{write_json, RunManifest};

/// Offset between the model seed and the calibration-data seed in `synth`.
const CALIB_SEED_OFFSET: u64 = 1;
/// Seed offset of the held-out evaluation inputs of the batch study.
const EVAL_SEED_OFFSET: u64 = 0xe7a1_5eed;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_csv(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> mrecg_core::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn recon_config(r: &ReconArgs) -> Result<ReconConfig, CliError> {
    let cfg = ReconConfig {
        iterations: r.iters,
        round_loss_weight: r.round_weight.unwrap_or(r.model_family.round_loss_weight()),
        learning_rate: r.lr,
        batch_size: r.batch_size,
        num_batches: r.num_batches,
        qdrop_prob: r.qdrop,
        seed: r.seed,
        act_bits: (!r.fp_activations).then_some(r.abits),
        relax_first_last: r.relax_first_last,
        granularity: r.granularity,
        ..ReconConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model_with_bits(path: &Path, bits: u32, m: &mut RunManifest) -> Result<ModelGraph, CliError> {
    if !(2..=16).contains(&bits) {
        return Err(CliError::Usage(format!("weight bit-width {bits} outside 2..=16")));
    }
    let mut g = load_model(path)?;
    m.input(path)?;
    g.set_weight_bits(bits);
    Ok(g)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("synth", a, Some(a.seed))?;
    let cfg = SynthConfig {
        num_blocks: a.blocks as usize,
        channels: a.channels,
        bottleneck_at: a.bottleneck,
        input_hw: a.hw,
        weight_bits: a.wbits,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let g = generate_synthetic_model(&cfg)?;
    let calib = generate_calibration(
        g.input_shape,
        a.calib_batch_size,
        a.calib_batches,
        a.distribution,
        a.seed.wrapping_add(CALIB_SEED_OFFSET),
    )?;
    create_dir(&a.out)?;
    let model_path = a.out.join("model.json");
    let calib_path = a.out.join("calib.bin");
    save_model(&g, &model_path)?;
    save_calibration(&calib.samples, &calib_path)?;

    if load_model(&model_path)? != g {
        return Err(CliError::Usage(format!("{} does not load back identically", model_path.display())));
    }
    for p in [model_path.clone(), a.out.join("model.bin"), calib_path] {
        manifest.output(&p)?;
    }
    manifest.write(&a.out, "synth")?;
    Ok(())
}

pub fn plan(a: &PlanArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("plan", a, None)?;
    let mut g = load_model(&a.model)?;
    manifest.input(&a.model)?;
    if let Some(bits) = a.bits {
        g.set_weight_bits(bits);
    }
    let modules = build_modules(&g, a.granularity);
    let cm = match a.metric {
        CapacityMetric::ModCap => capacity_vector(&modules, &g, a.metric, None)?,
        CapacityMetric::Loss => {
            let path = a
                .baseline_report
                .as_ref()
                .ok_or_else(|| CliError::Usage("--metric loss requires --baseline-report".into()))?;
            let report = ReconstructionReport::load(path)?;
            manifest.input(path)?;
            if report.granularity != a.granularity || report.modules.len() != modules.len() {
                return Err(CliError::Usage(format!(
                    "--baseline-report {} has {} {:?}-granularity modules, the plan needs {} {:?}-granularity ones",
                    path.display(),
                    report.modules.len(),
                    report.granularity,
                    modules.len(),
                    a.granularity
                )));
            }
            if report.scheme.selected() != 0 {
                return Err(CliError::Usage(format!(
                    "--baseline-report {} was produced with merged modules; a zero-mask run is required",
                    path.display()
                )));
            }
            capacity_vector(&modules, &g, a.metric, Some(&report.final_losses()))?
        }
    };
    let scores = score_pairs(&cm)?;
    let mode = a.mode.unwrap_or(SelectionMode::for_metric(a.metric));
    let scheme = select_topk(&scores, a.k, mode)?;
    if scheme.k_achieved < scheme.k_requested {
        log::warn!(
            "only {} of {} pairs selected: the remaining candidates share a module with a selected pair",
            scheme.k_achieved,
            scheme.k_requested
        );
    }
    let lambda = a.lambda.unwrap_or_else(|| default_lambda(&scores));
    let plan = Plan {
        mode: Some(mode),
        granularity: Some(a.granularity),
        capacity: Some(cm.values.clone()),
        pair_scores: Some(scores.iter().map(|p| p.score).collect()),
        lambda: Some(lambda),
        objective: Some(objective_value(&scheme.mask, &scores, a.k, lambda)?),
        ..Plan::new(&scheme, a.metric)
    };

    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    write_json(&a.out, &plan)?;
    Plan::load(&a.out)?.scheme()?;
    manifest.output(&a.out)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("plan");
    manifest.write(dir, stem)?;
    Ok(())
}

pub fn quantize(a: &QuantizeArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("quantize", a, Some(a.recon.seed))?;
    let cfg = recon_config(&a.recon)?;
    let g = load_model_with_bits(&a.model, a.recon.wbits, &mut manifest)?;
    let calib = load_calibration(&a.calib, cfg.batch_size, cfg.num_batches)?;
    manifest.input(&a.calib)?;
    let num_modules = build_modules(&g, cfg.granularity).len();
    let scheme = match &a.plan {
        None => GranularityScheme::zeros(num_modules),
        Some(path) => {
            let plan = Plan::load(path)?;
            manifest.input(path)?;
            if let Some(gran) = plan.granularity.filter(|&gran| gran != cfg.granularity) {
                return Err(CliError::Usage(format!(
                    "plan {} is for {gran:?} granularity but --granularity is {:?}",
                    path.display(),
                    cfg.granularity
                )));
            }
            plan.scheme()?
        }
    };

    let out = run_pipeline(&g, &scheme, &calib, &cfg)?;
    create_dir(&a.out)?;
    let report_path = a.out.join("report.json");
    fs::write(&report_path, out.report.to_json()?).map_err(|e| CliError::io(&report_path, e))?;
    let traj_path = a.out.join("trajectory.csv");
    write_csv(&traj_path, |buf| out.report.write_trajectory_csv(buf))?;

    ReconstructionReport::load(&report_path)?;
    manifest.output(&report_path)?;
    manifest.output(&traj_path)?;
    manifest.write(&a.out, "quantize")?;
    Ok(())
}

pub fn study_batch(a: &BatchArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("study batch", a, Some(a.recon.seed))?;
    let cfg = recon_config(&a.recon)?;
    let g = load_model_with_bits(&a.model, a.recon.wbits, &mut manifest)?;
    let eval = generate_calibration(
        g.input_shape,
        a.eval_samples,
        1,
        a.distribution,
        a.recon.seed.wrapping_add(EVAL_SEED_OFFSET),
    )?
    .samples;
    let study = BatchStudy {
        sizes: a.sizes.clone(),
        seeds_per_size: a.seeds,
        distribution: a.distribution,
        eval,
    };
    let rows: Vec<BatchStudyRow> = batch_size_study(&g, &study, &cfg)?;

    create_dir(&a.out)?;
    let csv_path = a.out.join("batch_study.csv");
    write_csv(&csv_path, |buf| write_batch_study_csv(&rows, buf))?;
    let json_path = a.out.join("batch_study.json");
    write_json(&json_path, &rows)?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.write(&a.out, "study-batch")?;
    Ok(())
}

#[derive(Serialize)]
struct SchemeSummary<'a> {
    /// Spearman correlation between `max_prev_loss` and `final_loss`.
    spearman: Option<f64>,
    rows: &'a [SchemeSample],
}

pub fn study_schemes(a: &SchemesArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("study schemes", a, Some(a.recon.seed))?;
    let cfg = recon_config(&a.recon)?;
    let g = load_model_with_bits(&a.model, a.recon.wbits, &mut manifest)?;
    let calib = load_calibration(&a.calib, cfg.batch_size, cfg.num_batches)?;
    manifest.input(&a.calib)?;
    let rows = sample_schemes(&g, &calib, a.samples, a.k.lo..=a.k.hi, a.recon.seed, &cfg)?;
    let prev: Vec<f64> = rows.iter().map(|r| r.max_prev_loss).collect();
    let fin: Vec<f64> = rows.iter().map(|r| r.final_loss).collect();
    let rho = spearman(&prev, &fin);

    create_dir(&a.out)?;
    let csv_path = a.out.join("scheme_samples.csv");
    write_csv(&csv_path, |buf| write_scheme_samples_csv(&rows, buf))?;
    let json_path = a.out.join("scheme_samples.json");
    write_json(
        &json_path,
        &SchemeSummary {
            spearman: rho.is_finite().then_some(rho),
            rows: &rows,
        },
    )?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.write(&a.out, "study-schemes")?;
    Ok(())
}

pub fn study_oscillation(a: &OscillationArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("study oscillation", a, None)?;
    let mut rows = Vec::with_capacity(a.reports.len());
    for path in &a.reports {
        let report = ReconstructionReport::load(path)?;
        manifest.input(path)?;
        let s = oscillation_score(&report.final_losses())?;
        rows.push(OscillationRow::new(path.display().to_string(), &s));
    }
    create_dir(&a.out)?;
    let csv_path = a.out.join("oscillation.csv");
    write_csv(&csv_path, |buf| write_oscillation_csv(&rows, buf))?;
    let json_path = a.out.join("oscillation.json");
    write_json(&json_path, &rows)?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.write(&a.out, "study-oscillation")?;
    Ok(())
}
