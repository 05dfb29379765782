//! End-to-end training pipelines.
//!
//! One-stage: backbone + head trained jointly with SGD momentum while the
//! EMA tracker accumulates batch-mean features; the tracker is frozen into
//! the checkpoint when training ends. Training always optimizes the plain
//! (non-counterfactual) logits; TDE applies only at inference.
//!
//! Two-stage: stage 1 is one-stage training with the instance-balanced
//! sampler; stage 2 freezes the backbone and retrains the classifier under
//! the class-balanced sampler, either from a fresh init (`Crt`) or by
//! learning per-class scales only (`Lws`).

mod checkpoint;

pub use checkpoint::write_metrics_csv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, Dataset, Sampler, SamplerKind, SplitTag};
use crate::ema::EmaTracker;
use crate::error::{Error, Result};
use crate::eval;
use crate::heads::{HeadGrads, HeadParams, HeadVariant};
use crate::infer::{cde_class_weights, InferenceConfig};
use crate::model::Model;
use crate::numeric::{softmax_xent, Activation, BackboneGrads, BackboneParams};
use crate::optim::{LrSchedule, OptimizerState, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    Uniform,
    /// Inverse-frequency class weights (one-stage re-balancing).
    Cde,
}

impl LossWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            LossWeighting::Uniform => "uniform",
            LossWeighting::Cde => "cde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => LossWeighting::Uniform,
            "cde" => LossWeighting::Cde,
            other => return Err(Error::InvalidConfig(format!("unknown loss weighting '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Mode {
    /// Re-initialize and retrain the whole classifier.
    Crt,
    /// Keep the classifier, learn per-class scales only.
    Lws,
}

impl Stage2Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage2Mode::Crt => "crt",
            Stage2Mode::Lws => "lws",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "crt" => Stage2Mode::Crt,
            "lws" => Stage2Mode::Lws,
            other => return Err(Error::InvalidConfig(format!("unknown stage-2 mode '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub sampler: SamplerKind,
    pub mode: Stage2Mode,
    pub base_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub head_variant: HeadVariant,
    /// K channel groups of the head.
    pub groups: usize,
    pub tau: f64,
    pub gamma: f64,
    pub tau_norm_exp: f64,
    /// Hidden layer widths of the backbone (ReLU).
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Activation on the feature (output) layer. ReLU keeps features in the
    /// non-negative orthant like pooled post-ReLU convolutional features,
    /// which is what lets the head direction act as a shared drift axis.
    pub feature_activation: Activation,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub loss_weighting: LossWeighting,
    /// EMA decay for the feature tracker; defaults to `momentum` when unset.
    pub ema_decay: Option<f64>,
    pub stage2: Option<Stage2Config>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head_variant: HeadVariant::Deconfound,
            groups: 2,
            tau: 16.0,
            gamma: 1.0 / 32.0,
            tau_norm_exp: 1.0,
            hidden_dims: vec![64],
            feature_dim: 64,
            feature_activation: Activation::Relu,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: ScheduleKind::Cosine,
            base_lr: 0.1,
            warmup_epochs: 5,
            warmup_start_factor: 0.1,
            epochs: 50,
            batch_size: 64,
            sampler: SamplerKind::InstanceBalanced,
            loss_weighting: LossWeighting::Uniform,
            ema_decay: None,
            stage2: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.feature_dim.is_multiple_of(self.groups) {
            return Err(Error::InvalidConfig(format!(
                "model.feature_dim {} not divisible by model.groups {}",
                self.feature_dim, self.groups
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("model.tau must be > 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidConfig("model.gamma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_norm_exp) {
            return Err(Error::InvalidConfig("model.tau_norm_exp must be in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("optim.momentum must be in [0,1)".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidConfig("train.ema_decay must be in [0,1)".into()));
            }
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        self.stage1_schedule().validate()?;
        if let Some(s2) = &self.stage2 {
            if s2.sampler != SamplerKind::ClassBalanced {
                return Err(Error::InvalidConfig(
                    "train.stage2_sampler must be class_balanced".into(),
                ));
            }
            if self.sampler != SamplerKind::InstanceBalanced {
                return Err(Error::InvalidConfig(
                    "two-stage training requires the instance_balanced sampler in stage 1".into(),
                ));
            }
            if s2.epochs == 0 {
                return Err(Error::InvalidConfig("train.stage2_epochs must be >= 1".into()));
            }
            if s2.mode == Stage2Mode::Lws && self.head_variant != HeadVariant::Lws {
                return Err(Error::InvalidConfig(
                    "stage-2 lws mode requires model.head = lws".into(),
                ));
            }
            if s2.base_lr < 0.0 || !s2.base_lr.is_finite() {
                return Err(Error::InvalidConfig("train.stage2_base_lr invalid".into()));
            }
        }
        Ok(())
    }

    pub fn effective_ema_decay(&self) -> f64 {
        self.ema_decay.unwrap_or(self.momentum)
    }

    fn stage1_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule.clone(),
            base_lr: self.base_lr,
            total_epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            warmup_start_factor: self.warmup_start_factor,
        }
    }
}

/// Per-epoch training metrics; val accuracies use plain-mode inference.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_overall: f64,
    pub val_many: Option<f64>,
    pub val_medium: Option<f64>,
    pub val_few: Option<f64>,
}

/// A trained model with its frozen tracker, config, and metric log.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub ema: EmaTracker,
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
}

/// Gradients for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbone: BackboneGrads,
    pub head: HeadGrads,
}

/// Which parameters a stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamScope {
    /// Backbone and classifier (LWS scales stay fixed; they are stage-2-only).
    All,
    /// Classifier weight and bias only (backbone frozen).
    HeadOnly,
    /// Per-class LWS scales only.
    ScalesOnly,
}

fn param_sizes(model: &Model, scope: ParamScope) -> Vec<usize> {
    let mut sizes = Vec::new();
    if scope == ParamScope::All {
        sizes.extend(model.backbone.param_sizes());
    }
    match scope {
        ParamScope::All | ParamScope::HeadOnly => {
            sizes.push(model.head.weight.data().len());
            if let Some(b) = &model.head.bias {
                sizes.push(b.len());
            }
        }
        ParamScope::ScalesOnly => {
            sizes.push(model.head.class_scales.as_ref().expect("lws scales").len());
        }
    }
    sizes
}

fn optimizer_step(
    model: &mut Model,
    grads: &ModelGrads,
    scope: ParamScope,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut grad_slices: Vec<&[f64]> = Vec::new();
    if scope == ParamScope::All {
        params.extend(model.backbone.param_slices_mut());
        grad_slices.extend(crate::numeric::backbone_grad_slices(&grads.backbone));
    }
    match scope {
        ParamScope::All | ParamScope::HeadOnly => {
            params.push(model.head.weight.data_mut());
            grad_slices.push(grads.head.weight.data());
            if let Some(b) = model.head.bias.as_mut() {
                params.push(b.as_mut_slice());
                grad_slices.push(grads.head.bias.as_ref().expect("bias grads").as_slice());
            }
        }
        ParamScope::ScalesOnly => {
            params.push(model.head.class_scales.as_mut().expect("lws scales").as_mut_slice());
            grad_slices.push(grads.head.class_scales.as_ref().expect("scale grads").as_slice());
        }
    }
    if weight_decay != 0.0 {
        let decayed: Vec<Vec<f64>> = params
            .iter()
            .zip(&grad_slices)
            .map(|(p, g)| p.iter().zip(g.iter()).map(|(pv, gv)| gv + weight_decay * pv).collect())
            .collect();
        let views: Vec<&[f64]> = decayed.iter().map(Vec::as_slice).collect();
        return state.step(&mut params, &views, lr);
    }
    state.step(&mut params, &grad_slices, lr)
}

/// One mini-batch: weighted-mean cross-entropy, exact gradients, and an EMA
/// update with the batch-mean feature.
pub fn loss_step(
    data: &Dataset,
    batch: &[usize],
    model: &Model,
    ema: &mut EmaTracker,
    class_weights: &[f64],
) -> Result<(f64, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if class_weights.len() != model.classes() {
        return Err(Error::shape("loss_step weights", model.classes(), class_weights.len()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = ModelGrads {
        backbone: BackboneGrads::zeros_like(&model.backbone),
        head: HeadGrads::zeros_like(&model.head),
    };
    let mut mean_feature = vec![0.0; model.backbone.feature_dim()];

    for &idx in batch {
        let x = data.feature(idx);
        let label = data.label(idx);
        let (feature, cache) = model.backbone.forward(x)?;
        for (m, f) in mean_feature.iter_mut().zip(&feature) {
            *m += inv_b * f;
        }
        let logits = model.head.logits(&feature)?;
        let (loss, mut grad_logits) = softmax_xent(&logits, label)?;
        let w = class_weights[label];
        total_loss += w * loss * inv_b;
        for g in grad_logits.iter_mut() {
            *g *= w;
        }
        let head_grads = model.head.backward(&feature, &grad_logits)?;
        let backbone_grads = model.backbone.backward(&cache, &head_grads.input)?;
        grads.head.accumulate(&head_grads, inv_b);
        grads.backbone.accumulate(&backbone_grads, inv_b);
    }
    if !total_loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    ema.update(&mean_feature)?;
    Ok((total_loss, grads))
}

fn class_weights_for(data: &Dataset, weighting: LossWeighting) -> Result<Vec<f64>> {
    match weighting {
        LossWeighting::Uniform => Ok(vec![1.0; data.classes()]),
        LossWeighting::Cde => cde_class_weights(data.class_train_counts()),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model,
    ema: &mut EmaTracker,
    data: &Dataset,
    sampler: &Sampler,
    schedule: &LrSchedule,
    weights: &[f64],
    scope: ParamScope,
    momentum: f64,
    weight_decay: f64,
    epoch_offset: usize,
    metrics: &mut Vec<EpochMetrics>,
) -> Result<()> {
    let mut optimizer = OptimizerState::new(&param_sizes(model, scope), momentum)?;
    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut epoch_loss = 0.0;
        let batches = sampler.epoch_batches(epoch as u64);
        let n_batches = batches.len();
        for (iteration, batch) in batches.iter().enumerate() {
            let (loss, grads) = loss_step(data, batch, model, ema, weights).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged {
                    epoch: epoch_offset + epoch,
                    iteration,
                    detail,
                },
                other => other,
            })?;
            epoch_loss += loss;
            optimizer_step(model, &grads, scope, &mut optimizer, lr, weight_decay)?;
        }
        let val = eval::evaluate_split(model, ema, data, SplitTag::Val, &InferenceConfig::plain())?;
        metrics.push(EpochMetrics {
            epoch: epoch_offset + epoch,
            lr,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_overall: val.overall,
            val_many: val.many,
            val_medium: val.medium,
            val_few: val.few,
        });
    }
    Ok(())
}

fn build_model(data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if data.feature_dim() == 0 {
        return Err(Error::InvalidConfig("dataset has no features".into()));
    }
    let mut dims = vec![data.feature_dim()];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1717));
    let backbone = BackboneParams::random_with_output(&dims, cfg.feature_activation, &mut rng)?;
    let head = HeadParams::random(
        cfg.head_variant,
        data.classes(),
        cfg.feature_dim,
        cfg.groups,
        cfg.tau,
        cfg.gamma,
        cfg.tau_norm_exp,
        &mut rng,
    )?;
    Model::new(backbone, head)
}

/// Train with the configured sampler and head in a single stage. The returned
/// checkpoint's tracker is frozen; no EMA update happens afterwards.
pub fn train_one_stage(data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.stage2.is_some() {
        return Err(Error::InvalidConfig(
            "one-stage training with a stage-2 block; use two-stage".into(),
        ));
    }
    let mut model = build_model(data, cfg)?;
    let mut ema = EmaTracker::new(cfg.feature_dim, cfg.effective_ema_decay())?;
    let sampler = Sampler::new(cfg.sampler, data, cfg.batch_size, mix_seed(cfg.seed, 0xBA7C))?;
    let weights = class_weights_for(data, cfg.loss_weighting)?;
    let mut metrics = Vec::new();
    run_stage(
        &mut model,
        &mut ema,
        data,
        &sampler,
        &cfg.stage1_schedule(),
        &weights,
        ParamScope::All,
        cfg.momentum,
        cfg.weight_decay,
        0,
        &mut metrics,
    )?;
    ema.freeze();
    Ok(Checkpoint { model, ema, config: cfg.clone(), metrics })
}

/// Stage 1 under the instance-balanced sampler, then a frozen-backbone
/// classifier retrain under the class-balanced sampler.
pub fn train_two_stage(data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage2 = cfg
        .stage2
        .clone()
        .ok_or_else(|| Error::InvalidConfig("two-stage training requires a stage-2 block".into()))?;

    let mut model = build_model(data, cfg)?;
    let mut ema = EmaTracker::new(cfg.feature_dim, cfg.effective_ema_decay())?;
    let weights = class_weights_for(data, cfg.loss_weighting)?;
    let mut metrics = Vec::new();
    let sampler1 = Sampler::new(cfg.sampler, data, cfg.batch_size, mix_seed(cfg.seed, 0xBA7C))?;
    run_stage(
        &mut model,
        &mut ema,
        data,
        &sampler1,
        &cfg.stage1_schedule(),
        &weights,
        ParamScope::All,
        cfg.momentum,
        cfg.weight_decay,
        0,
        &mut metrics,
    )?;

    let scope = match stage2.mode {
        Stage2Mode::Crt => {
            // fresh classifier, same hyperparameters
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x57A6E2));
            model.head = HeadParams::random(
                cfg.head_variant,
                data.classes(),
                cfg.feature_dim,
                cfg.groups,
                cfg.tau,
                cfg.gamma,
                cfg.tau_norm_exp,
                &mut rng,
            )?;
            ParamScope::HeadOnly
        }
        Stage2Mode::Lws => ParamScope::ScalesOnly,
    };
    let schedule2 = LrSchedule::cosine(stage2.base_lr, stage2.epochs);
    let sampler2 = Sampler::new(stage2.sampler, data, cfg.batch_size, mix_seed(cfg.seed, 0xC1A55))?;
    // stage-2 re-balancing comes from the sampler; weights stay uniform
    let uniform = vec![1.0; data.classes()];
    run_stage(
        &mut model,
        &mut ema,
        data,
        &sampler2,
        &schedule2,
        &uniform,
        scope,
        cfg.momentum,
        cfg.weight_decay,
        cfg.epochs,
        &mut metrics,
    )?;
    ema.freeze();
    Ok(Checkpoint { model, ema, config: cfg.clone(), metrics })
}

/// Dispatch on the presence of the stage-2 block.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.stage2.is_some() {
        train_two_stage(data, cfg)
    } else {
        train_one_stage(data, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetProfile;
    use crate::infer::predict;

    fn toy_separable() -> Dataset {
        // two well-separated balanced classes
        let profile = DatasetProfile {
            classes: 2,
            max_count: 40,
            imbalance_ratio: 1.0,
            feature_dim: 8,
            noise_sigma: 0.05,
            prototype_seed: 5,
            background_fraction: 0.0,
            val_per_class: 8,
            test_per_class: 8,
            clusters: 0,
            cluster_spread: 0.4,
        };
        Dataset::synthesize(&profile, 1).unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            head_variant: HeadVariant::Linear,
            groups: 1,
            tau: 1.0,
            hidden_dims: vec![16],
            feature_dim: 8,
            epochs: 20,
            batch_size: 16,
            warmup_epochs: 2,
            base_lr: 0.1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn train_accuracy(ckpt: &Checkpoint, data: &Dataset) -> f64 {
        let idx = data.indices(SplitTag::Train);
        let cfg = InferenceConfig::plain();
        let correct = idx
            .iter()
            .filter(|&&i| predict(data.feature(i), &ckpt.model, &ckpt.ema, &cfg).unwrap().class == data.label(i))
            .count();
        correct as f64 / idx.len() as f64
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let data = toy_separable();
        let ckpt = train_one_stage(&data, &fast_cfg()).unwrap();
        assert_eq!(train_accuracy(&ckpt, &data), 1.0);
        assert!(ckpt.ema.is_frozen());
        assert_eq!(ckpt.metrics.len(), 20);
    }

    #[test]
    fn identical_seeds_identical_checkpoints() {
        let data = toy_separable();
        let cfg = fast_cfg();
        let a = train_one_stage(&data, &cfg).unwrap();
        let b = train_one_stage(&data, &cfg).unwrap();
        assert_eq!(a.model.backbone.layers()[0].weight, b.model.backbone.layers()[0].weight);
        assert_eq!(a.model.head.weight, b.model.head.weight);
        assert_eq!(a.ema.running(), b.ema.running());
        assert_eq!(a.metrics, b.metrics);
        let c = train_one_stage(&data, &TrainConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.model.head.weight, c.model.head.weight);
    }

    #[test]
    fn two_stage_freezes_backbone() {
        let data = toy_separable();
        let mut cfg = fast_cfg();
        cfg.epochs = 5;
        cfg.stage2 = Some(Stage2Config {
            epochs: 5,
            sampler: SamplerKind::ClassBalanced,
            mode: Stage2Mode::Crt,
            base_lr: 0.05,
        });
        // reference: stage 1 only
        let stage1_cfg = TrainConfig { stage2: None, ..cfg.clone() };
        let stage1 = train_one_stage(&data, &stage1_cfg).unwrap();
        let two = train_two_stage(&data, &cfg).unwrap();
        for (a, b) in stage1.model.backbone.layers().iter().zip(two.model.backbone.layers()) {
            assert_eq!(a.weight, b.weight, "backbone changed in stage 2");
            assert_eq!(a.bias, b.bias);
        }
        // classifier was re-trained: it should differ from the stage-1 one
        assert_ne!(stage1.model.head.weight, two.model.head.weight);
        assert_eq!(two.metrics.len(), 10);
    }

    #[test]
    fn stage2_requires_class_balanced_sampler() {
        let mut cfg = fast_cfg();
        cfg.stage2 = Some(Stage2Config {
            epochs: 3,
            sampler: SamplerKind::InstanceBalanced,
            mode: Stage2Mode::Crt,
            base_lr: 0.05,
        });
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn lws_stage2_trains_scales_only() {
        let data = toy_separable();
        let mut cfg = fast_cfg();
        cfg.head_variant = HeadVariant::Lws;
        cfg.tau = 1.0;
        cfg.epochs = 5;
        cfg.stage2 = Some(Stage2Config {
            epochs: 5,
            sampler: SamplerKind::ClassBalanced,
            mode: Stage2Mode::Lws,
            base_lr: 0.05,
        });
        let stage1_cfg = TrainConfig { stage2: None, ..cfg.clone() };
        let stage1 = train_one_stage(&data, &stage1_cfg).unwrap();
        // scales never move in stage 1
        assert!(stage1.model.head.class_scales.as_ref().unwrap().iter().all(|&g| g == 1.0));
        let two = train_two_stage(&data, &cfg).unwrap();
        // stage 2 keeps the classifier weight but moves the scales
        assert_eq!(stage1.model.head.weight, two.model.head.weight);
        assert!(two.model.head.class_scales.as_ref().unwrap().iter().any(|&g| g != 1.0));
    }

    #[test]
    fn uniform_weights_equal_unweighted_loss() {
        let data = toy_separable();
        let cfg = fast_cfg();
        let model = build_model(&data, &cfg).unwrap();
        let mut ema1 = EmaTracker::new(cfg.feature_dim, 0.9).unwrap();
        let mut ema2 = EmaTracker::new(cfg.feature_dim, 0.9).unwrap();
        let batch: Vec<usize> = data.indices(SplitTag::Train)[..8].to_vec();
        let uniform = vec![1.0; data.classes()];
        let cde = cde_class_weights(data.class_train_counts()).unwrap();
        // balanced counts make the cde weights all exactly 1
        assert!(cde.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        let (l1, _) = loss_step(&data, &batch, &model, &mut ema1, &uniform).unwrap();
        let (l2, _) = loss_step(&data, &batch, &model, &mut ema2, &cde).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn single_sample_batch_equals_pointwise_xent() {
        let data = toy_separable();
        let cfg = fast_cfg();
        let model = build_model(&data, &cfg).unwrap();
        let mut ema = EmaTracker::new(cfg.feature_dim, 0.9).unwrap();
        let idx = data.indices(SplitTag::Train)[0];
        let uniform = vec![1.0; data.classes()];
        let (loss, _) = loss_step(&data, &[idx], &model, &mut ema, &uniform).unwrap();
        let logits = model.logits(data.feature(idx)).unwrap();
        let (expected, _) = softmax_xent(&logits, data.label(idx)).unwrap();
        assert!((loss - expected).abs() < 1e-15);
    }

    // End-to-end gradient check of the loss_step path: batch loss vs central
    // finite differences over every backbone and head parameter.
    #[test]
    fn loss_step_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let data = toy_separable();
        let mut cfg = fast_cfg();
        cfg.head_variant = HeadVariant::Deconfound;
        cfg.groups = 2;
        cfg.tau = 16.0;
        let mut model = build_model(&data, &cfg).unwrap();
        // move off the init point so ReLU kinks are generic
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for slice in model.backbone.param_slices_mut() {
            for v in slice.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let batch: Vec<usize> = data.indices(SplitTag::Train)[..6].to_vec();
        let weights = cde_class_weights(data.class_train_counts()).unwrap();
        let loss_of = |model: &Model| {
            let mut ema = EmaTracker::new(cfg.feature_dim, 0.9).unwrap();
            loss_step(&data, &batch, model, &mut ema, &weights).unwrap().0
        };
        let mut ema = EmaTracker::new(cfg.feature_dim, 0.9).unwrap();
        let (_, grads) = loss_step(&data, &batch, &model, &mut ema, &weights).unwrap();
        let h = 1e-5;
        let check = |an: f64, fd: f64, what: &str| {
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: {an} vs {fd}");
        };
        for layer in 0..model.backbone.layers().len() {
            for p in (0..model.backbone.layers()[layer].weight.data().len()).step_by(7) {
                let orig = model.backbone.layers()[layer].weight.data()[p];
                model.backbone.layers_mut()[layer].weight.data_mut()[p] = orig + h;
                let up = loss_of(&model);
                model.backbone.layers_mut()[layer].weight.data_mut()[p] = orig - h;
                let down = loss_of(&model);
                model.backbone.layers_mut()[layer].weight.data_mut()[p] = orig;
                check(grads.backbone.layers[layer].0.data()[p], (up - down) / (2.0 * h), "backbone");
            }
        }
        for p in (0..model.head.weight.data().len()).step_by(5) {
            let orig = model.head.weight.data()[p];
            model.head.weight.data_mut()[p] = orig + h;
            let up = loss_of(&model);
            model.head.weight.data_mut()[p] = orig - h;
            let down = loss_of(&model);
            model.head.weight.data_mut()[p] = orig;
            check(grads.head.weight.data()[p], (up - down) / (2.0 * h), "head");
        }
    }

    #[test]
    fn separable_toy_is_perfect_on_every_split() {
        let data = toy_separable();
        let ckpt = train_one_stage(&data, &fast_cfg()).unwrap();
        let report =
            eval::evaluate_split(&ckpt.model, &ckpt.ema, &data, SplitTag::Test, &InferenceConfig::plain())
                .unwrap();
        assert_eq!(report.overall, 1.0);
        for acc in [report.many, report.medium, report.few].into_iter().flatten() {
            assert_eq!(acc, 1.0);
        }
    }

    #[test]
    fn ema_updates_once_per_batch_and_freezes_at_end() {
        let data = toy_separable();
        let mut cfg = fast_cfg();
        cfg.epochs = 3;
        let ckpt = train_one_stage(&data, &cfg).unwrap();
        let train_n = data.indices(SplitTag::Train).len();
        let batches_per_epoch = train_n.div_ceil(cfg.batch_size);
        assert_eq!(ckpt.ema.updates(), (3 * batches_per_epoch) as u64);
        assert!(ckpt.ema.is_frozen());
    }
}
