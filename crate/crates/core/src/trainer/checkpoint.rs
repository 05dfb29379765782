//! Checkpoint container: versioned binary with exact f64 bits, so a loaded
//! model reproduces every prediction bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::*;
use crate::data::SamplerKind;
use crate::ema::EmaTracker;
use crate::error::{Error, Result};
use crate::heads::{HeadParams, HeadVariant};
use crate::model::Model;
use crate::numeric::{Activation, BackboneParams, Layer, Matrix};
use crate::optim::ScheduleKind;
use crate::trainer::{
    Checkpoint, EpochMetrics, LossWeighting, Stage2Config, Stage2Mode, TrainConfig,
};

const MAGIC: &[u8; 4] = b"LTCK";
const VERSION: u32 = 1;

fn variant_to_u8(v: HeadVariant) -> u8 {
    match v {
        HeadVariant::Linear => 0,
        HeadVariant::Cosine => 1,
        HeadVariant::Capsule => 2,
        HeadVariant::TauNorm => 3,
        HeadVariant::Lws => 4,
        HeadVariant::Deconfound => 5,
    }
}

fn variant_from_u8(v: u8) -> Option<HeadVariant> {
    Some(match v {
        0 => HeadVariant::Linear,
        1 => HeadVariant::Cosine,
        2 => HeadVariant::Capsule,
        3 => HeadVariant::TauNorm,
        4 => HeadVariant::Lws,
        5 => HeadVariant::Deconfound,
        _ => return None,
    })
}

fn write_config(w: &mut impl Write, cfg: &TrainConfig) -> std::io::Result<()> {
    write_u8(w, variant_to_u8(cfg.head_variant))?;
    write_u32(w, cfg.groups as u32)?;
    write_f64(w, cfg.tau)?;
    write_f64(w, cfg.gamma)?;
    write_f64(w, cfg.tau_norm_exp)?;
    write_u32(w, cfg.hidden_dims.len() as u32)?;
    for &d in &cfg.hidden_dims {
        write_u32(w, d as u32)?;
    }
    write_u32(w, cfg.feature_dim as u32)?;
    write_u8(w, if cfg.feature_activation == Activation::Relu { 0 } else { 1 })?;
    write_f64(w, cfg.momentum)?;
    write_f64(w, cfg.weight_decay)?;
    match &cfg.schedule {
        ScheduleKind::Cosine => write_u8(w, 0)?,
        ScheduleKind::Step { milestones, gamma } => {
            write_u8(w, 1)?;
            write_u32(w, milestones.len() as u32)?;
            for &m in milestones {
                write_u32(w, m as u32)?;
            }
            write_f64(w, *gamma)?;
        }
        ScheduleKind::Constant => write_u8(w, 2)?,
    }
    write_f64(w, cfg.base_lr)?;
    write_u32(w, cfg.warmup_epochs as u32)?;
    write_f64(w, cfg.warmup_start_factor)?;
    write_u32(w, cfg.epochs as u32)?;
    write_u32(w, cfg.batch_size as u32)?;
    write_u8(w, if cfg.sampler == SamplerKind::InstanceBalanced { 0 } else { 1 })?;
    write_u8(w, if cfg.loss_weighting == LossWeighting::Uniform { 0 } else { 1 })?;
    match cfg.ema_decay {
        Some(d) => {
            write_u8(w, 1)?;
            write_f64(w, d)?;
        }
        None => write_u8(w, 0)?,
    }
    match &cfg.stage2 {
        Some(s2) => {
            write_u8(w, 1)?;
            write_u32(w, s2.epochs as u32)?;
            write_u8(w, if s2.sampler == SamplerKind::InstanceBalanced { 0 } else { 1 })?;
            write_u8(w, if s2.mode == Stage2Mode::Crt { 0 } else { 1 })?;
            write_f64(w, s2.base_lr)?;
        }
        None => write_u8(w, 0)?,
    }
    write_u64(w, cfg.seed)
}

fn read_config(r: &mut impl Read) -> std::io::Result<TrainConfig> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let head_variant = variant_from_u8(read_u8(r)?).ok_or_else(|| bad("bad head variant"))?;
    let groups = read_u32(r)? as usize;
    let tau = read_f64(r)?;
    let gamma = read_f64(r)?;
    let tau_norm_exp = read_f64(r)?;
    let n_hidden = read_u32(r)? as usize;
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(read_u32(r)? as usize);
    }
    let feature_dim = read_u32(r)? as usize;
    let feature_activation = if read_u8(r)? == 0 { Activation::Relu } else { Activation::Identity };
    let momentum = read_f64(r)?;
    let weight_decay = read_f64(r)?;
    let schedule = match read_u8(r)? {
        0 => ScheduleKind::Cosine,
        1 => {
            let n = read_u32(r)? as usize;
            let mut milestones = Vec::with_capacity(n);
            for _ in 0..n {
                milestones.push(read_u32(r)? as usize);
            }
            let gamma = read_f64(r)?;
            ScheduleKind::Step { milestones, gamma }
        }
        2 => ScheduleKind::Constant,
        _ => return Err(bad("bad schedule kind")),
    };
    let base_lr = read_f64(r)?;
    let warmup_epochs = read_u32(r)? as usize;
    let warmup_start_factor = read_f64(r)?;
    let epochs = read_u32(r)? as usize;
    let batch_size = read_u32(r)? as usize;
    let sampler = if read_u8(r)? == 0 {
        SamplerKind::InstanceBalanced
    } else {
        SamplerKind::ClassBalanced
    };
    let loss_weighting = if read_u8(r)? == 0 { LossWeighting::Uniform } else { LossWeighting::Cde };
    let ema_decay = if read_u8(r)? == 1 { Some(read_f64(r)?) } else { None };
    let stage2 = if read_u8(r)? == 1 {
        let epochs = read_u32(r)? as usize;
        let sampler = if read_u8(r)? == 0 {
            SamplerKind::InstanceBalanced
        } else {
            SamplerKind::ClassBalanced
        };
        let mode = if read_u8(r)? == 0 { Stage2Mode::Crt } else { Stage2Mode::Lws };
        let base_lr = read_f64(r)?;
        Some(Stage2Config { epochs, sampler, mode, base_lr })
    } else {
        None
    };
    let seed = read_u64(r)?;
    Ok(TrainConfig {
        head_variant,
        groups,
        tau,
        gamma,
        tau_norm_exp,
        hidden_dims,
        feature_dim,
        feature_activation,
        momentum,
        weight_decay,
        schedule,
        base_lr,
        warmup_epochs,
        warmup_start_factor,
        epochs,
        batch_size,
        sampler,
        loss_weighting,
        ema_decay,
        stage2,
        seed,
    })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_config(w, &self.config)?;

        let layers = self.model.backbone.layers();
        write_u32(w, layers.len() as u32)?;
        for layer in layers {
            write_u32(w, layer.weight.rows() as u32)?;
            write_u32(w, layer.weight.cols() as u32)?;
            write_u8(w, if layer.activation == Activation::Relu { 0 } else { 1 })?;
            write_f64s(w, layer.weight.data())?;
            write_f64s(w, &layer.bias)?;
        }

        let head = &self.model.head;
        write_u8(w, variant_to_u8(head.variant))?;
        write_u32(w, head.classes() as u32)?;
        write_u32(w, head.dim() as u32)?;
        write_u32(w, head.groups as u32)?;
        write_f64(w, head.tau)?;
        write_f64(w, head.gamma)?;
        write_f64(w, head.tau_norm_exp)?;
        write_f64s(w, head.weight.data())?;
        match &head.bias {
            Some(b) => {
                write_u8(w, 1)?;
                write_f64s(w, b)?;
            }
            None => write_u8(w, 0)?,
        }
        match &head.class_scales {
            Some(s) => {
                write_u8(w, 1)?;
                write_f64s(w, s)?;
            }
            None => write_u8(w, 0)?,
        }

        write_u32(w, self.ema.dim() as u32)?;
        write_f64(w, self.ema.decay())?;
        write_u64(w, self.ema.updates())?;
        write_u8(w, u8::from(self.ema.is_frozen()))?;
        write_f64s(w, self.ema.running())?;

        write_u32(w, self.metrics.len() as u32)?;
        for m in &self.metrics {
            write_u32(w, m.epoch as u32)?;
            write_f64(w, m.lr)?;
            write_f64(w, m.train_loss)?;
            write_f64(w, m.val_overall)?;
            for v in [m.val_many, m.val_medium, m.val_few] {
                match v {
                    Some(x) => {
                        write_u8(w, 1)?;
                        write_f64(w, x)?;
                    }
                    None => write_u8(w, 0)?,
                }
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Checkpoint::read_from(&mut r).map_err(|e| Error::parse(path, e))
    }

    fn read_from(r: &mut impl Read) -> std::result::Result<Checkpoint, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err("bad magic (not a checkpoint file)".into());
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let config = read_config(r).map_err(io)?;

        let n_layers = read_u32(r).map_err(io)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = read_u32(r).map_err(io)? as usize;
            let cols = read_u32(r).map_err(io)? as usize;
            let act = if read_u8(r).map_err(io)? == 0 { Activation::Relu } else { Activation::Identity };
            let n = sane_count(rows as u64 * cols as u64, "weight").map_err(io)?;
            let weight =
                Matrix::from_vec(rows, cols, read_f64s(r, n).map_err(io)?).map_err(|e| e.to_string())?;
            let bias = read_f64s(r, rows).map_err(io)?;
            layers.push(Layer { weight, bias, activation: act });
        }
        let backbone = BackboneParams::new(layers).map_err(|e| e.to_string())?;

        let variant = variant_from_u8(read_u8(r).map_err(io)?).ok_or("bad head variant")?;
        let classes = read_u32(r).map_err(io)? as usize;
        let dim = read_u32(r).map_err(io)? as usize;
        let groups = read_u32(r).map_err(io)? as usize;
        let tau = read_f64(r).map_err(io)?;
        let gamma = read_f64(r).map_err(io)?;
        let tau_norm_exp = read_f64(r).map_err(io)?;
        let n = sane_count(classes as u64 * dim as u64, "head weight").map_err(io)?;
        let weight = Matrix::from_vec(classes, dim, read_f64s(r, n).map_err(io)?)
            .map_err(|e| e.to_string())?;
        let mut head =
            HeadParams::new(variant, weight, groups, tau, gamma, tau_norm_exp).map_err(|e| e.to_string())?;
        if read_u8(r).map_err(io)? == 1 {
            head.bias = Some(read_f64s(r, classes).map_err(io)?);
        } else {
            head.bias = None;
        }
        if read_u8(r).map_err(io)? == 1 {
            head.class_scales = Some(read_f64s(r, classes).map_err(io)?);
        } else {
            head.class_scales = None;
        }

        let ema_dim = read_u32(r).map_err(io)? as usize;
        let decay = read_f64(r).map_err(io)?;
        let updates = read_u64(r).map_err(io)?;
        let frozen = read_u8(r).map_err(io)? != 0;
        let running = read_f64s(r, ema_dim).map_err(io)?;
        let ema = EmaTracker::from_parts(running, decay, updates, frozen).map_err(|e| e.to_string())?;

        let n_metrics = sane_count(read_u32(r).map_err(io)? as u64, "metrics").map_err(io)?;
        let mut metrics = Vec::with_capacity(n_metrics);
        for _ in 0..n_metrics {
            let epoch = read_u32(r).map_err(io)? as usize;
            let lr = read_f64(r).map_err(io)?;
            let train_loss = read_f64(r).map_err(io)?;
            let val_overall = read_f64(r).map_err(io)?;
            let mut opt = [None, None, None];
            for slot in opt.iter_mut() {
                if read_u8(r).map_err(io)? == 1 {
                    *slot = Some(read_f64(r).map_err(io)?);
                }
            }
            metrics.push(EpochMetrics {
                epoch,
                lr,
                train_loss,
                val_overall,
                val_many: opt[0],
                val_medium: opt[1],
                val_few: opt[2],
            });
        }

        let model = Model::new(backbone, head).map_err(|e| e.to_string())?;
        Ok(Checkpoint { model, ema, config, metrics })
    }
}

/// Per-epoch metrics log with a fixed header.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "epoch,lr,train_loss,val_overall,val_many,val_medium,val_few").map_err(io_err)?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for m in metrics {
        writeln!(
            w,
            "{},{:.8},{:.8},{:.6},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.val_overall,
            fmt(m.val_many),
            fmt(m.val_medium),
            fmt(m.val_few)
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetProfile, SplitTag};
    use crate::data::Dataset;
    use crate::infer::{predict, InferenceConfig};
    use crate::trainer::train_one_stage;

    #[test]
    fn checkpoint_roundtrip_preserves_predictions_bitwise() {
        let profile = DatasetProfile {
            classes: 4,
            max_count: 20,
            imbalance_ratio: 4.0,
            feature_dim: 8,
            noise_sigma: 0.3,
            prototype_seed: 2,
            background_fraction: 0.0,
            val_per_class: 3,
            test_per_class: 3,
            clusters: 0,
            cluster_spread: 0.4,
        };
        let data = Dataset::synthesize(&profile, 8).unwrap();
        let cfg = TrainConfig {
            hidden_dims: vec![12],
            feature_dim: 8,
            epochs: 4,
            batch_size: 8,
            warmup_epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let ckpt = train_one_stage(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ltck");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(ckpt.config, loaded.config);
        assert_eq!(ckpt.metrics, loaded.metrics);
        for mode in [InferenceConfig::plain(), InferenceConfig::tde(3.0)] {
            for i in data.indices(SplitTag::Test) {
                let a = predict(data.feature(i), &ckpt.model, &ckpt.ema, &mode).unwrap();
                let b = predict(data.feature(i), &loaded.model, &loaded.ema, &mode).unwrap();
                assert_eq!(a.logits, b.logits);
                assert_eq!(a.class, b.class);
            }
        }

        // save -> load -> save is byte-identical
        let path2 = dir.path().join("m2.ltck");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ltck");
        std::fs::write(&path, b"LTCKgarbage").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let metrics = vec![EpochMetrics {
            epoch: 0,
            lr: 0.1,
            train_loss: 2.5,
            val_overall: 0.25,
            val_many: Some(0.5),
            val_medium: None,
            val_few: Some(0.0),
        }];
        write_metrics_csv(&path, &metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,lr,train_loss,val_overall,val_many,val_medium,val_few");
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,0.10000000,2.50000000,0.250000,0.500000,,"));
    }
}
