//! Run configuration: a flat key=value file with dotted section prefixes
//! (`data.`, `model.`, `optim.`, `train.`, `infer.`, `output.`).
//!
//! Lines are `key = value`; `#` starts a comment. Unknown or duplicate keys
//! are rejected by name, and `parse(render(cfg)) == cfg` holds for every
//! valid config. Conditional keys: `optim.step_*` only with
//! `optim.schedule = step`, `train.stage2_*` only with
//! `train.pipeline = two_stage`, and `train.ema_decay` may be omitted to
//! follow `optim.momentum`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use longtail_core::data::{DatasetProfile, SamplerKind};
use longtail_core::heads::HeadVariant;
use longtail_core::infer::{InferenceConfig, InferenceMode};
use longtail_core::numeric::Activation;
use longtail_core::optim::ScheduleKind;
use longtail_core::trainer::{LossWeighting, Stage2Config, Stage2Mode, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: DatasetProfile,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: DatasetProfile::default(),
            train: TrainConfig::default(),
            infer: InferenceConfig::plain(),
            output_dir: "runs".to_string(),
        }
    }
}

fn bad_key(key: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("config key '{key}': {detail}"))
}

struct KeyMap {
    entries: BTreeMap<String, String>,
}

impl KeyMap {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| bad_key(key, e)),
        }
    }
}

fn parse_usize_list(key: &str, raw: &str) -> Result<Vec<usize>, CliError> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|e| bad_key(key, format!("'{s}': {e}"))))
        .collect()
}

fn render_usize_list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(CliError::Validation(format!("duplicate config key '{key}'")));
            }
        }
        let mut map = KeyMap { entries };
        let defaults = RunConfig::default();
        let dp = defaults.profile;
        let dt = defaults.train;

        let profile = DatasetProfile {
            classes: map.parse("data.classes", dp.classes)?,
            max_count: map.parse("data.max_count", dp.max_count)?,
            imbalance_ratio: map.parse("data.imbalance_ratio", dp.imbalance_ratio)?,
            feature_dim: map.parse("data.feature_dim", dp.feature_dim)?,
            noise_sigma: map.parse("data.noise_sigma", dp.noise_sigma)?,
            prototype_seed: map.parse("data.prototype_seed", dp.prototype_seed)?,
            background_fraction: map.parse("data.background_fraction", dp.background_fraction)?,
            val_per_class: map.parse("data.val_per_class", dp.val_per_class)?,
            test_per_class: map.parse("data.test_per_class", dp.test_per_class)?,
            clusters: map.parse("data.clusters", dp.clusters)?,
            cluster_spread: map.parse("data.cluster_spread", dp.cluster_spread)?,
        };

        let head_variant = match map.take("model.head") {
            None => dt.head_variant,
            Some(raw) => HeadVariant::parse(&raw).map_err(|e| bad_key("model.head", e))?,
        };
        let feature_activation = match map.take("model.feature_activation").as_deref() {
            None => dt.feature_activation,
            Some("relu") => Activation::Relu,
            Some("identity") => Activation::Identity,
            Some(other) => return Err(bad_key("model.feature_activation", format!("unknown '{other}'"))),
        };
        let hidden_dims = match map.take("model.hidden_dims") {
            None => dt.hidden_dims.clone(),
            Some(raw) => parse_usize_list("model.hidden_dims", &raw)?,
        };

        let schedule_name = map.take("optim.schedule").unwrap_or_else(|| "cosine".into());
        let step_milestones = map.take("optim.step_milestones");
        let step_gamma = map.take("optim.step_gamma");
        let schedule = match schedule_name.as_str() {
            "cosine" | "constant" => {
                if step_milestones.is_some() {
                    return Err(bad_key("optim.step_milestones", "only valid with optim.schedule = step"));
                }
                if step_gamma.is_some() {
                    return Err(bad_key("optim.step_gamma", "only valid with optim.schedule = step"));
                }
                if schedule_name == "cosine" {
                    ScheduleKind::Cosine
                } else {
                    ScheduleKind::Constant
                }
            }
            "step" => {
                let milestones = parse_usize_list(
                    "optim.step_milestones",
                    step_milestones
                        .as_deref()
                        .ok_or_else(|| bad_key("optim.step_milestones", "required for step schedule"))?,
                )?;
                let gamma: f64 = step_gamma
                    .ok_or_else(|| bad_key("optim.step_gamma", "required for step schedule"))?
                    .parse()
                    .map_err(|e| bad_key("optim.step_gamma", e))?;
                ScheduleKind::Step { milestones, gamma }
            }
            other => return Err(bad_key("optim.schedule", format!("unknown '{other}'"))),
        };

        let sampler = match map.take("train.sampler") {
            None => dt.sampler,
            Some(raw) => SamplerKind::parse(&raw).map_err(|e| bad_key("train.sampler", e))?,
        };
        let loss_weighting = match map.take("train.loss_weighting") {
            None => dt.loss_weighting,
            Some(raw) => LossWeighting::parse(&raw).map_err(|e| bad_key("train.loss_weighting", e))?,
        };
        let ema_decay = match map.take("train.ema_decay") {
            None => None,
            Some(raw) => Some(raw.parse().map_err(|e| bad_key("train.ema_decay", e))?),
        };

        let pipeline = map.take("train.pipeline").unwrap_or_else(|| "one_stage".into());
        let s2_epochs = map.take("train.stage2_epochs");
        let s2_sampler = map.take("train.stage2_sampler");
        let s2_mode = map.take("train.stage2_mode");
        let s2_lr = map.take("train.stage2_base_lr");
        let stage2 = match pipeline.as_str() {
            "one_stage" => {
                for (k, v) in [
                    ("train.stage2_epochs", &s2_epochs),
                    ("train.stage2_sampler", &s2_sampler),
                    ("train.stage2_mode", &s2_mode),
                    ("train.stage2_base_lr", &s2_lr),
                ] {
                    if v.is_some() {
                        return Err(bad_key(k, "only valid with train.pipeline = two_stage"));
                    }
                }
                None
            }
            "two_stage" => Some(Stage2Config {
                epochs: match s2_epochs {
                    None => 20,
                    Some(raw) => raw.parse().map_err(|e| bad_key("train.stage2_epochs", e))?,
                },
                sampler: match s2_sampler {
                    None => SamplerKind::ClassBalanced,
                    Some(raw) => {
                        SamplerKind::parse(&raw).map_err(|e| bad_key("train.stage2_sampler", e))?
                    }
                },
                mode: match s2_mode {
                    None => Stage2Mode::Crt,
                    Some(raw) => Stage2Mode::parse(&raw).map_err(|e| bad_key("train.stage2_mode", e))?,
                },
                base_lr: match s2_lr {
                    None => 0.01,
                    Some(raw) => raw.parse().map_err(|e| bad_key("train.stage2_base_lr", e))?,
                },
            }),
            other => return Err(bad_key("train.pipeline", format!("unknown '{other}'"))),
        };

        let train = TrainConfig {
            head_variant,
            groups: map.parse("model.groups", dt.groups)?,
            tau: map.parse("model.tau", dt.tau)?,
            gamma: map.parse("model.gamma", dt.gamma)?,
            tau_norm_exp: map.parse("model.tau_norm_exp", dt.tau_norm_exp)?,
            hidden_dims,
            feature_dim: map.parse("model.feature_dim", dt.feature_dim)?,
            feature_activation,
            momentum: map.parse("optim.momentum", dt.momentum)?,
            weight_decay: map.parse("optim.weight_decay", dt.weight_decay)?,
            schedule,
            base_lr: map.parse("optim.base_lr", dt.base_lr)?,
            warmup_epochs: map.parse("optim.warmup_epochs", dt.warmup_epochs)?,
            warmup_start_factor: map.parse("optim.warmup_start_factor", dt.warmup_start_factor)?,
            epochs: map.parse("train.epochs", dt.epochs)?,
            batch_size: map.parse("train.batch_size", dt.batch_size)?,
            sampler,
            loss_weighting,
            ema_decay,
            stage2,
            seed: map.parse("train.seed", dt.seed)?,
        };

        let mode = match map.take("infer.mode") {
            None => InferenceMode::Plain,
            Some(raw) => InferenceMode::parse(&raw).map_err(|e| bad_key("infer.mode", e))?,
        };
        let infer = InferenceConfig {
            mode,
            alpha: map.parse("infer.alpha", 0.0)?,
            background_present: map.parse("infer.background_present", false)?,
        };

        let output_dir = map.take("output.dir").unwrap_or_else(|| "runs".into());

        if let Some(key) = map.entries.keys().next() {
            return Err(CliError::Validation(format!("unknown config key '{key}'")));
        }

        let cfg = RunConfig { profile, train, infer, output_dir };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.profile
            .validate()
            .map_err(|e| CliError::Validation(format!("data section: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.infer
            .validate()
            .map_err(|e| CliError::Validation(format!("infer section: {e}")))?;
        if self.infer.mode == InferenceMode::TdeBgExempt && self.profile.background_fraction == 0.0 {
            return Err(CliError::Validation(
                "infer.mode = tde_bg_exempt requires data.background_fraction > 0".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text form; `parse(render(cfg)) == cfg`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let p = &self.profile;
        let t = &self.train;
        let _ = writeln!(s, "data.classes = {}", p.classes);
        let _ = writeln!(s, "data.max_count = {}", p.max_count);
        let _ = writeln!(s, "data.imbalance_ratio = {}", p.imbalance_ratio);
        let _ = writeln!(s, "data.feature_dim = {}", p.feature_dim);
        let _ = writeln!(s, "data.noise_sigma = {}", p.noise_sigma);
        let _ = writeln!(s, "data.prototype_seed = {}", p.prototype_seed);
        let _ = writeln!(s, "data.background_fraction = {}", p.background_fraction);
        let _ = writeln!(s, "data.val_per_class = {}", p.val_per_class);
        let _ = writeln!(s, "data.test_per_class = {}", p.test_per_class);
        let _ = writeln!(s, "data.clusters = {}", p.clusters);
        let _ = writeln!(s, "data.cluster_spread = {}", p.cluster_spread);
        let _ = writeln!(s, "model.head = {}", t.head_variant.as_str());
        let _ = writeln!(s, "model.groups = {}", t.groups);
        let _ = writeln!(s, "model.tau = {}", t.tau);
        let _ = writeln!(s, "model.gamma = {}", t.gamma);
        let _ = writeln!(s, "model.tau_norm_exp = {}", t.tau_norm_exp);
        let _ = writeln!(s, "model.hidden_dims = {}", render_usize_list(&t.hidden_dims));
        let _ = writeln!(s, "model.feature_dim = {}", t.feature_dim);
        let _ = writeln!(
            s,
            "model.feature_activation = {}",
            if t.feature_activation == Activation::Relu { "relu" } else { "identity" }
        );
        let _ = writeln!(s, "optim.momentum = {}", t.momentum);
        let _ = writeln!(s, "optim.weight_decay = {}", t.weight_decay);
        match &t.schedule {
            ScheduleKind::Cosine => {
                let _ = writeln!(s, "optim.schedule = cosine");
            }
            ScheduleKind::Constant => {
                let _ = writeln!(s, "optim.schedule = constant");
            }
            ScheduleKind::Step { milestones, gamma } => {
                let _ = writeln!(s, "optim.schedule = step");
                let _ = writeln!(s, "optim.step_milestones = {}", render_usize_list(milestones));
                let _ = writeln!(s, "optim.step_gamma = {gamma}");
            }
        }
        let _ = writeln!(s, "optim.base_lr = {}", t.base_lr);
        let _ = writeln!(s, "optim.warmup_epochs = {}", t.warmup_epochs);
        let _ = writeln!(s, "optim.warmup_start_factor = {}", t.warmup_start_factor);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.sampler = {}", t.sampler.as_str());
        let _ = writeln!(s, "train.loss_weighting = {}", t.loss_weighting.as_str());
        if let Some(d) = t.ema_decay {
            let _ = writeln!(s, "train.ema_decay = {d}");
        }
        match &t.stage2 {
            None => {
                let _ = writeln!(s, "train.pipeline = one_stage");
            }
            Some(s2) => {
                let _ = writeln!(s, "train.pipeline = two_stage");
                let _ = writeln!(s, "train.stage2_epochs = {}", s2.epochs);
                let _ = writeln!(s, "train.stage2_sampler = {}", s2.sampler.as_str());
                let _ = writeln!(s, "train.stage2_mode = {}", s2.mode.as_str());
                let _ = writeln!(s, "train.stage2_base_lr = {}", s2.base_lr);
            }
        }
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "infer.mode = {}", self.infer.mode.as_str());
        let _ = writeln!(s, "infer.alpha = {}", self.infer.alpha);
        let _ = writeln!(s, "infer.background_present = {}", self.infer.background_present);
        let _ = writeln!(s, "output.dir = {}", self.output_dir);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn roundtrip_two_stage_step_schedule() {
        let mut cfg = RunConfig::default();
        cfg.train.schedule = ScheduleKind::Step { milestones: vec![16, 19], gamma: 0.1 };
        cfg.train.epochs = 20;
        cfg.train.ema_decay = Some(0.95);
        cfg.train.stage2 = Some(Stage2Config {
            epochs: 10,
            sampler: SamplerKind::ClassBalanced,
            mode: Stage2Mode::Crt,
            base_lr: 0.02,
        });
        let parsed = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("data.classses = 5\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("data.classses"), "{msg}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = RunConfig::parse("data.classes = 5\ndata.classes = 6\n").unwrap_err();
        assert!(format!("{err}").contains("duplicate"));
    }

    #[test]
    fn bad_value_names_key() {
        let err = RunConfig::parse("model.tau = banana\n").unwrap_err();
        assert!(format!("{err}").contains("model.tau"));
    }

    #[test]
    fn stage2_keys_require_two_stage() {
        let err = RunConfig::parse("train.stage2_epochs = 5\n").unwrap_err();
        assert!(format!("{err}").contains("train.stage2_epochs"));
    }

    #[test]
    fn step_keys_require_step_schedule() {
        let err = RunConfig::parse("optim.step_gamma = 0.5\n").unwrap_err();
        assert!(format!("{err}").contains("optim.step_gamma"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\ndata.classes = 7 # trailing\n").unwrap();
        assert_eq!(cfg.profile.classes, 7);
    }

    #[test]
    fn bg_exempt_requires_background() {
        let err = RunConfig::parse("infer.mode = tde_bg_exempt\ninfer.background_present = true\n")
            .unwrap_err();
        assert!(format!("{err}").contains("background_fraction"));
        let ok = RunConfig::parse(
            "infer.mode = tde_bg_exempt\ninfer.background_present = true\ndata.background_fraction = 0.5\n",
        );
        assert!(ok.is_ok());
    }
}
