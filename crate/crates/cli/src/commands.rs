//! Subcommand implementations.

use std::path::Path;

use longtail_core::data::{Dataset, SplitTag};
use longtail_core::eval::{
    alpha_sweep, diagnostics, evaluate_split, write_diag_csv, write_split_csv, write_sweep_csv,
    SplitReport,
};
use longtail_core::infer::{InferenceConfig, InferenceMode};
use longtail_core::trainer::{self, write_metrics_csv, Checkpoint};

use crate::config::RunConfig;
use crate::CliError;

pub fn synth(config: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::parse_file(config)?;
    let dataset = Dataset::synthesize(&cfg.profile, seed)?;
    dataset.save(out)?;
    println!(
        "wrote {} ({} samples, {} classes, dim {})",
        out.display(),
        dataset.len(),
        dataset.classes(),
        dataset.feature_dim()
    );
    Ok(())
}

pub fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::parse_file(config)?;
    let dataset = Dataset::load(data)?;
    let ckpt = trainer::train(&dataset, &cfg.train)?;
    ckpt.save(out)?;
    let metrics_path = match metrics {
        Some(p) => p.to_path_buf(),
        None => {
            let mut os = out.as_os_str().to_owned();
            os.push(".metrics.csv");
            std::path::PathBuf::from(os)
        }
    };
    write_metrics_csv(&metrics_path, &ckpt.metrics)?;
    let last = ckpt.metrics.last().expect("at least one epoch");
    println!(
        "wrote {} and {} (final val accuracy {:.4})",
        out.display(),
        metrics_path.display(),
        last.val_overall
    );
    Ok(())
}

fn parse_split(split: &str) -> Result<SplitTag, CliError> {
    match split {
        "test" => Ok(SplitTag::Test),
        "val" => Ok(SplitTag::Val),
        other => Err(CliError::Validation(format!("unknown split '{other}' (use test or val)"))),
    }
}

fn inference_config(
    mode: &str,
    alpha: f64,
    data: &Dataset,
) -> Result<InferenceConfig, CliError> {
    let mode = InferenceMode::parse(mode)?;
    if mode == InferenceMode::Plain && alpha != 0.0 {
        return Err(CliError::Validation(
            "--alpha is only meaningful with --mode tde or tde_bg_exempt".into(),
        ));
    }
    if mode == InferenceMode::TdeBgExempt && !data.has_background() {
        return Err(CliError::Validation(
            "--mode tde_bg_exempt requires a dataset with a background class".into(),
        ));
    }
    let cfg = InferenceConfig { mode, alpha, background_present: data.has_background() };
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &SplitReport) {
    let fmt = |v: Option<f64>| v.map_or("   --".to_string(), |x| format!("{x:.4}"));
    println!("mode {} alpha {}", report.mode.as_str(), report.alpha);
    println!("many    {} ({} samples)", fmt(report.many), report.many_count);
    println!("medium  {} ({} samples)", fmt(report.medium), report.medium_count);
    println!("few     {} ({} samples)", fmt(report.few), report.few_count);
    println!("overall {:.4} ({} samples)", report.overall, report.total_count);
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    mode: &str,
    alpha: f64,
    split: &str,
    out: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let tag = parse_split(split)?;
    let cfg = inference_config(mode, alpha, &dataset)?;
    let report = evaluate_split(&ckpt.model, &ckpt.ema, &dataset, tag, &cfg)?;
    print_report(&report);
    if let Some(path) = out {
        write_split_csv(path, &report)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = predictions {
        let mut rows = Vec::new();
        for i in dataset.indices(tag) {
            let pred = longtail_core::infer::predict(dataset.feature(i), &ckpt.model, &ckpt.ema, &cfg)?;
            rows.push((i, dataset.label(i), pred.class, pred.probabilities));
        }
        longtail_core::data::write_predictions_csv(path, &rows, dataset.classes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn parse_alphas(raw: &str) -> Result<Vec<f64>, CliError> {
    let alphas: Vec<f64> = raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("bad alpha '{s}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    if alphas.is_empty() || alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Validation("alphas must be non-empty and strictly increasing".into()));
    }
    Ok(alphas)
}

pub fn sweep(
    checkpoint: &Path,
    data: &Path,
    alphas: &str,
    split: &str,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let tag = parse_split(split)?;
    let alphas = parse_alphas(alphas)?;
    let table = alpha_sweep(&ckpt, &dataset, tag, &alphas)?;
    write_sweep_csv(out, &table)?;
    let best = longtail_core::eval::best_alpha(&table);
    println!("wrote {} ({} rows, best alpha {best})", out.display(), table.rows.len());
    Ok(())
}

pub fn diag(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let table = diagnostics(&ckpt, &dataset)?;
    write_diag_csv(out, &table)?;
    println!("wrote {} ({} classes)", out.display(), table.rows.len());
    Ok(())
}
