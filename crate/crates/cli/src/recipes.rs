//! Named end-to-end recipes over the built-in desk-scale benchmark
//! (20 classes, imbalance ratio 100, 64-dim features).
//!
//! Every recipe is a pure function of (--seeds, --base-seed): run it twice
//! with the same arguments and every emitted CSV is byte-identical.
//!
//! - `alpha-sweep`: de-confounded training, then a TDE alpha sweep on the
//!   val split per seed plus the seed-mean curve.
//! - `method-comparison`: baseline/cosine/capsule/de-confounded heads plus
//!   TDE with the val-tuned alpha, evaluated on the balanced test split.
//! - `four-regimes`: conventional baseline, one-stage re-weighting,
//!   two-stage classifier retraining, and counterfactual TDE.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use longtail_core::data::{mix_seed, Dataset, SamplerKind, SplitTag};
use longtail_core::eval::{alpha_sweep, best_alpha, evaluate, write_sweep_csv, SplitReport, SweepTable};
use longtail_core::heads::HeadVariant;
use longtail_core::infer::InferenceConfig;
use longtail_core::trainer::{self, Checkpoint, LossWeighting, Stage2Config, Stage2Mode, TrainConfig};

use crate::config::RunConfig;
use crate::CliError;

pub const ALPHA_GRID: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

pub fn run(recipe: &str, outdir: &Path, seeds: u64, base_seed: u64) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Validation("--seeds must be >= 1".into()));
    }
    std::fs::create_dir_all(outdir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", outdir.display())))?;
    let cfg = RunConfig::default();
    std::fs::write(outdir.join("config.txt"), cfg.render())
        .map_err(|e| CliError::Runtime(format!("cannot write config.txt: {e}")))?;
    match recipe {
        "alpha-sweep" => alpha_sweep_recipe(&cfg, outdir, seeds, base_seed),
        "method-comparison" => method_comparison(&cfg, outdir, seeds, base_seed),
        "four-regimes" => four_regimes(&cfg, outdir, seeds, base_seed),
        other => Err(CliError::Usage(format!(
            "unknown recipe '{other}' (available: alpha-sweep, method-comparison, four-regimes)"
        ))),
    }
}

fn benchmark_data(cfg: &RunConfig, seed: u64) -> Result<Dataset, CliError> {
    Ok(Dataset::synthesize(&cfg.profile, mix_seed(seed, 1))?)
}

fn variant_config(base: &TrainConfig, variant: HeadVariant, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = mix_seed(seed, 2);
    cfg.head_variant = variant;
    if variant != HeadVariant::Deconfound {
        // baselines are single-group
        cfg.groups = 1;
    }
    if variant == HeadVariant::Linear {
        cfg.tau = 1.0;
    }
    cfg
}

fn train_variant(
    data: &Dataset,
    base: &TrainConfig,
    variant: HeadVariant,
    seed: u64,
) -> Result<Checkpoint, CliError> {
    Ok(trainer::train(data, &variant_config(base, variant, seed))?)
}

/// (many, medium, few, overall) seed means.
type MeanRow = (f64, f64, f64, f64);

/// Seed-mean of split reports (all splits must be present on the benchmark).
fn mean_reports(reports: &[SplitReport]) -> MeanRow {
    let n = reports.len() as f64;
    let mut acc = (0.0, 0.0, 0.0, 0.0);
    for r in reports {
        acc.0 += r.many.expect("many split present") / n;
        acc.1 += r.medium.expect("medium split present") / n;
        acc.2 += r.few.expect("few split present") / n;
        acc.3 += r.overall / n;
    }
    acc
}

fn write_method_table(path: &Path, rows: &[(String, MeanRow)]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    writeln!(w, "method,many,medium,few,overall").map_err(io_err)?;
    for (name, (many, medium, few, overall)) in rows {
        writeln!(w, "{name},{many:.6},{medium:.6},{few:.6},{overall:.6}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn tuned_tde_report(ckpt: &Checkpoint, data: &Dataset) -> Result<(f64, SplitReport), CliError> {
    let sweep = alpha_sweep(ckpt, data, SplitTag::Val, &ALPHA_GRID)?;
    let alpha = best_alpha(&sweep);
    let report = evaluate(ckpt, data, &InferenceConfig::tde(alpha))?;
    Ok((alpha, report))
}

fn alpha_sweep_recipe(cfg: &RunConfig, outdir: &Path, seeds: u64, base_seed: u64) -> Result<(), CliError> {
    let mut tables: Vec<SweepTable> = Vec::new();
    for s in base_seed..base_seed + seeds {
        let data = benchmark_data(cfg, s)?;
        let ckpt = train_variant(&data, &cfg.train, HeadVariant::Deconfound, s)?;
        let table = alpha_sweep(&ckpt, &data, SplitTag::Val, &ALPHA_GRID)?;
        write_sweep_csv(&outdir.join(format!("sweep_seed{s}.csv")), &table)?;
        tables.push(table);
    }
    // seed-mean curve
    let path = outdir.join("sweep.csv");
    let file = File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    writeln!(w, "alpha,many,medium,few,overall").map_err(io_err)?;
    for (i, &alpha) in ALPHA_GRID.iter().enumerate() {
        let reports: Vec<SplitReport> = tables.iter().map(|t| t.rows[i].1.clone()).collect();
        let (many, medium, few, overall) = mean_reports(&reports);
        writeln!(w, "{alpha},{many:.6},{medium:.6},{few:.6},{overall:.6}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    println!("wrote {} (+{} per-seed files)", path.display(), seeds);
    Ok(())
}

fn method_comparison(cfg: &RunConfig, outdir: &Path, seeds: u64, base_seed: u64) -> Result<(), CliError> {
    let variants = [
        ("baseline", HeadVariant::Linear),
        ("cosine", HeadVariant::Cosine),
        ("capsule", HeadVariant::Capsule),
        ("deconfound", HeadVariant::Deconfound),
    ];
    let mut plain: Vec<Vec<SplitReport>> = vec![Vec::new(); variants.len()];
    let mut tde: Vec<SplitReport> = Vec::new();
    for s in base_seed..base_seed + seeds {
        let data = benchmark_data(cfg, s)?;
        for (i, (_, variant)) in variants.iter().enumerate() {
            let ckpt = train_variant(&data, &cfg.train, *variant, s)?;
            plain[i].push(evaluate(&ckpt, &data, &InferenceConfig::plain())?);
            if *variant == HeadVariant::Deconfound {
                tde.push(tuned_tde_report(&ckpt, &data)?.1);
            }
        }
    }
    let mut rows: Vec<(String, MeanRow)> = Vec::new();
    for (i, (name, _)) in variants.iter().enumerate() {
        rows.push((name.to_string(), mean_reports(&plain[i])));
    }
    rows.push(("deconfound_tde".to_string(), mean_reports(&tde)));
    let path = outdir.join("methods.csv");
    write_method_table(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn four_regimes(cfg: &RunConfig, outdir: &Path, seeds: u64, base_seed: u64) -> Result<(), CliError> {
    let mut baseline = Vec::new();
    let mut reweight = Vec::new();
    let mut two_stage = Vec::new();
    let mut tde = Vec::new();
    for s in base_seed..base_seed + seeds {
        let data = benchmark_data(cfg, s)?;

        let lin = train_variant(&data, &cfg.train, HeadVariant::Linear, s)?;
        baseline.push(evaluate(&lin, &data, &InferenceConfig::plain())?);

        let mut cde_cfg = variant_config(&cfg.train, HeadVariant::Linear, s);
        cde_cfg.loss_weighting = LossWeighting::Cde;
        let cde = trainer::train(&data, &cde_cfg)?;
        reweight.push(evaluate(&cde, &data, &InferenceConfig::plain())?);

        let mut nde_cfg = variant_config(&cfg.train, HeadVariant::Linear, s);
        nde_cfg.stage2 = Some(Stage2Config {
            epochs: 20,
            sampler: SamplerKind::ClassBalanced,
            mode: Stage2Mode::Crt,
            base_lr: cfg.train.base_lr * 0.1,
        });
        let nde = trainer::train(&data, &nde_cfg)?;
        two_stage.push(evaluate(&nde, &data, &InferenceConfig::plain())?);

        let dc = train_variant(&data, &cfg.train, HeadVariant::Deconfound, s)?;
        tde.push(tuned_tde_report(&dc, &data)?.1);
    }
    let rows = vec![
        ("baseline".to_string(), mean_reports(&baseline)),
        ("cde_reweight".to_string(), mean_reports(&reweight)),
        ("nde_crt".to_string(), mean_reports(&two_stage)),
        ("tde".to_string(), mean_reports(&tde)),
    ];
    let path = outdir.join("four_regimes.csv");
    write_method_table(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}
