//! Balanced evaluation with many/medium/few/overall breakdown, alpha sweeps,
//! and per-class diagnostics, all emitted as plot-ready CSV tables.
//!
//! CSV schemas (fixed; headers are the version):
//!
//! - `splits.csv`:  `mode,alpha,many,medium,few,overall,n_many,n_medium,n_few,n_total`
//! - `sweep.csv`:   `alpha,many,medium,few,overall`
//! - `diag.csv`:    `class,train_count,freq_split,mean_feature_norm,weight_norm,mean_cos_head`
//!
//! Absent splits render as empty fields, never as zeros.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{Dataset, FrequencySplit, SplitTag};
use crate::ema::EmaTracker;
use crate::error::{Error, Result};
use crate::infer::{predict, InferenceConfig};
use crate::model::Model;
use crate::numeric::{dot, guard_norm, l2_norm};
use crate::trainer::Checkpoint;

/// Accuracy per frequency split on one evaluation pass. A split with no
/// classes is reported as absent.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub overall: f64,
    pub many_count: usize,
    pub medium_count: usize,
    pub few_count: usize,
    pub total_count: usize,
    pub mode: crate::infer::InferenceMode,
    pub alpha: f64,
}

/// Evaluate a model on one split of a dataset.
pub fn evaluate_split(
    model: &Model,
    ema: &EmaTracker,
    data: &Dataset,
    tag: SplitTag,
    cfg: &InferenceConfig,
) -> Result<SplitReport> {
    cfg.validate()?;
    if data.classes() != model.classes() {
        return Err(Error::shape("evaluate classes", model.classes(), data.classes()));
    }
    let indices = data.indices(tag);
    if indices.is_empty() {
        return Err(Error::InvalidConfig("evaluation split is empty".into()));
    }
    let mut correct = [0usize; 4]; // many, medium, few, overall
    let mut total = [0usize; 4];
    for i in indices {
        let truth = data.label(i);
        let pred = predict(data.feature(i), model, ema, cfg)?;
        let slot = match data.freq_splits()[truth] {
            FrequencySplit::Many => 0,
            FrequencySplit::Medium => 1,
            FrequencySplit::Few => 2,
        };
        total[slot] += 1;
        total[3] += 1;
        if pred.class == truth {
            correct[slot] += 1;
            correct[3] += 1;
        }
    }
    let acc = |s: usize| {
        if total[s] == 0 {
            None
        } else {
            Some(correct[s] as f64 / total[s] as f64)
        }
    };
    Ok(SplitReport {
        many: acc(0),
        medium: acc(1),
        few: acc(2),
        overall: correct[3] as f64 / total[3] as f64,
        many_count: total[0],
        medium_count: total[1],
        few_count: total[2],
        total_count: total[3],
        mode: cfg.mode,
        alpha: cfg.alpha,
    })
}

/// Evaluate a checkpoint on the balanced test split.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, cfg: &InferenceConfig) -> Result<SplitReport> {
    evaluate_split(&ckpt.model, &ckpt.ema, data, SplitTag::Test, cfg)
}

/// One row per alpha value, strictly increasing.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<(f64, SplitReport)>,
}

/// TDE evaluation across an alpha grid on one split (the val split for
/// hyperparameter selection).
pub fn alpha_sweep(
    ckpt: &Checkpoint,
    data: &Dataset,
    tag: SplitTag,
    alphas: &[f64],
) -> Result<SweepTable> {
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("alpha sweep needs at least one value".into()));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("alphas must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = InferenceConfig::tde(alpha);
        let report = evaluate_split(&ckpt.model, &ckpt.ema, data, tag, &cfg)?;
        rows.push((alpha, report));
    }
    Ok(SweepTable { rows })
}

/// The alpha with the best overall accuracy; ties go to the smaller alpha.
pub fn best_alpha(table: &SweepTable) -> f64 {
    let mut best = table.rows[0].0;
    let mut best_acc = table.rows[0].1.overall;
    for (alpha, report) in &table.rows[1..] {
        if report.overall > best_acc {
            best_acc = report.overall;
            best = *alpha;
        }
    }
    best
}

/// Per-class diagnostics over the train split: mean feature magnitude,
/// classifier weight norm, and mean cosine to the head direction.
#[derive(Debug, Clone)]
pub struct DiagRow {
    pub class: usize,
    pub train_count: usize,
    pub freq_split: FrequencySplit,
    pub mean_feature_norm: f64,
    pub weight_norm: f64,
    pub mean_cos_head: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsTable {
    pub rows: Vec<DiagRow>,
}

pub fn diagnostics(ckpt: &Checkpoint, data: &Dataset) -> Result<DiagnosticsTable> {
    let model = &ckpt.model;
    if data.classes() != model.classes() {
        return Err(Error::shape("diagnostics classes", model.classes(), data.classes()));
    }
    let head_dir = ckpt.ema.head_direction()?;
    let c = data.classes();
    let mut norm_sum = vec![0.0; c];
    let mut cos_sum = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for i in data.indices(SplitTag::Train) {
        let (feature, _) = model.feature(data.feature(i))?;
        let label = data.label(i);
        let n = l2_norm(&feature);
        norm_sum[label] += n;
        cos_sum[label] += dot(&feature, &head_dir) / guard_norm(n);
        counts[label] += 1;
    }
    let rows = (0..c)
        .map(|class| DiagRow {
            class,
            train_count: data.class_train_counts()[class],
            freq_split: data.freq_splits()[class],
            mean_feature_norm: norm_sum[class] / counts[class].max(1) as f64,
            weight_norm: l2_norm(model.head.weight.row(class)),
            mean_cos_head: cos_sum[class] / counts[class].max(1) as f64,
        })
        .collect();
    Ok(DiagnosticsTable { rows })
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn write_split_csv(path: &Path, report: &SplitReport) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "mode,alpha,many,medium,few,overall,n_many,n_medium,n_few,n_total").map_err(io_err)?;
    writeln!(
        w,
        "{},{},{},{},{},{:.6},{},{},{},{}",
        report.mode.as_str(),
        report.alpha,
        opt_field(report.many),
        opt_field(report.medium),
        opt_field(report.few),
        report.overall,
        report.many_count,
        report.medium_count,
        report.few_count,
        report.total_count
    )
    .map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn write_sweep_csv(path: &Path, table: &SweepTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "alpha,many,medium,few,overall").map_err(io_err)?;
    for (alpha, r) in &table.rows {
        writeln!(
            w,
            "{},{},{},{},{:.6}",
            alpha,
            opt_field(r.many),
            opt_field(r.medium),
            opt_field(r.few),
            r.overall
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn write_diag_csv(path: &Path, table: &DiagnosticsTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "class,train_count,freq_split,mean_feature_norm,weight_norm,mean_cos_head")
        .map_err(io_err)?;
    for r in &table.rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.class,
            r.train_count,
            r.freq_split.as_str(),
            r.mean_feature_norm,
            r.weight_norm,
            r.mean_cos_head
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
