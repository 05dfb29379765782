//! Prediction modes: plain logits, counterfactual TDE, and background-exempted
//! TDE, plus the inverse-frequency loss weights used by re-balanced training.
//!
//! TDE subtracts, per channel group, the logits the head would produce if the
//! input kept only its projection on the head direction (scaled by `alpha`),
//! while every denominator keeps the factual feature norm. With `alpha = 0`
//! it reduces bit-exactly to the plain logits.

use crate::ema::EmaTracker;
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::model::Model;
use crate::numeric::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Plain,
    Tde,
    TdeBgExempt,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Plain => "plain",
            InferenceMode::Tde => "tde",
            InferenceMode::TdeBgExempt => "tde_bg_exempt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "plain" => InferenceMode::Plain,
            "tde" => InferenceMode::Tde,
            "tde_bg_exempt" => InferenceMode::TdeBgExempt,
            other => return Err(Error::InvalidConfig(format!("unknown inference mode '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    /// Trade-off between the indirect and direct effect; 0 disables the
    /// counterfactual subtraction.
    pub alpha: f64,
    /// Class 0 is a background class. Required by `TdeBgExempt`.
    pub background_present: bool,
}

impl InferenceConfig {
    pub fn plain() -> Self {
        InferenceConfig { mode: InferenceMode::Plain, alpha: 0.0, background_present: false }
    }

    pub fn tde(alpha: f64) -> Self {
        InferenceConfig { mode: InferenceMode::Tde, alpha, background_present: false }
    }

    pub fn tde_bg_exempt(alpha: f64) -> Self {
        InferenceConfig { mode: InferenceMode::TdeBgExempt, alpha, background_present: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.mode == InferenceMode::TdeBgExempt && !self.background_present {
            return Err(Error::InvalidConfig(
                "tde_bg_exempt requires a background class (background_present)".into(),
            ));
        }
        Ok(())
    }
}

/// A scored sample: logits, softmax (or background-exempted) probabilities,
/// and the argmax class with lowest-index tie-break.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// Counterfactual TDE logits for a feature vector.
///
/// `head_dirs` are the per-group unit head directions (from a frozen tracker,
/// one slice per channel group of the head).
pub fn tde_logits(
    x: &[f64],
    head: &HeadParams,
    head_dirs: &[Vec<f64>],
    alpha: f64,
) -> Result<Vec<f64>> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    head.logits_with_counterfactual(x, Some(head_dirs), alpha)
}

/// Background-exempted probabilities: the background class (index 0) keeps its
/// plain de-confounded probability `p[0]`, the foreground classes share the
/// remaining mass in proportion to their TDE probabilities `q`.
pub fn background_exempted(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::shape("background_exempted", p.len(), q.len()));
    }
    if p.len() < 2 {
        return Err(Error::InvalidConfig("need a background and at least one foreground class".into()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| !(0.0..=1.0 + 1e-9).contains(x)) {
            return Err(Error::InvalidConfig(format!("{name} is not a probability vector (sum {sum})")));
        }
    }
    let q0 = q[0];
    if 1.0 - q0 < 1e-12 {
        return Err(Error::InvalidConfig("degenerate background: q0 = 1".into()));
    }
    let p0 = p[0];
    let fg_scale = (1.0 - p0) / (1.0 - q0);
    let mut out = Vec::with_capacity(p.len());
    out.push(p0);
    for &qi in &q[1..] {
        out.push(fg_scale * qi);
    }
    Ok(out)
}

/// Inverse-frequency class weights, normalized to mean 1.
pub fn cde_class_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return Err(Error::InvalidConfig("no classes".into()));
    }
    if let Some(i) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidConfig(format!("class {i} has zero count")));
    }
    let raw: Vec<f64> = class_counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Argmax with lowest-index tie-break.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mode-dispatched prediction for one raw input.
///
/// TDE modes require a frozen tracker; inference never updates it.
pub fn predict(x: &[f64], model: &Model, ema: &EmaTracker, cfg: &InferenceConfig) -> Result<Prediction> {
    cfg.validate()?;
    let (feature, _) = model.feature(x)?;
    match cfg.mode {
        InferenceMode::Plain => {
            let logits = model.head.logits(&feature)?;
            let probabilities = softmax(&logits);
            let class = argmax(&probabilities);
            Ok(Prediction { logits, probabilities, class })
        }
        InferenceMode::Tde => {
            let dirs = frozen_dirs(ema, &model.head)?;
            let logits = tde_logits(&feature, &model.head, &dirs, cfg.alpha)?;
            let probabilities = softmax(&logits);
            let class = argmax(&probabilities);
            Ok(Prediction { logits, probabilities, class })
        }
        InferenceMode::TdeBgExempt => {
            let dirs = frozen_dirs(ema, &model.head)?;
            let plain = model.head.logits(&feature)?;
            let logits = tde_logits(&feature, &model.head, &dirs, cfg.alpha)?;
            let p = softmax(&plain);
            let q = softmax(&logits);
            let probabilities = background_exempted(&p, &q)?;
            let class = argmax(&probabilities);
            Ok(Prediction { logits, probabilities, class })
        }
    }
}

fn frozen_dirs(ema: &EmaTracker, head: &HeadParams) -> Result<Vec<Vec<f64>>> {
    if !ema.is_frozen() {
        return Err(Error::TrackerState("TDE inference requires a frozen tracker".into()));
    }
    ema.head_direction_groups(head.groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadVariant;
    use crate::numeric::{l2_norm, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2_norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn random_dirs(groups: usize, gd: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..groups)
            .map(|_| unit(&(0..gd).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    // Independent direct evaluation of the TDE formula: per group,
    //   tau/K * [ w.x / ((||w||+gamma)||x||) - alpha cos(x,dhat) w.dhat / (||w||+gamma) ]
    // with divisor norms floored at 1e-12 and cos(x,dhat) = (x.dhat)/max(||x||,1e-12).
    fn tde_oracle(
        x: &[f64],
        w_rows: &[&[f64]],
        dirs: &[Vec<f64>],
        k: usize,
        tau: f64,
        gamma: f64,
        alpha: f64,
    ) -> Vec<f64> {
        let gd = x.len() / k;
        let mut out = Vec::new();
        for w in w_rows {
            let mut acc = 0.0;
            for g in 0..k {
                let xk = &x[g * gd..(g + 1) * gd];
                let wk = &w[g * gd..(g + 1) * gd];
                let dk = &dirs[g];
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                let xn = dot(xk, xk).sqrt().max(1e-12);
                let wn = dot(wk, wk).sqrt().max(1e-12);
                let cos = dot(xk, dk) / xn;
                acc += dot(wk, xk) / ((wn + gamma) * xn) - alpha * cos * dot(wk, dk) / (wn + gamma);
            }
            out.push(tau / k as f64 * acc);
        }
        out
    }

    #[test]
    fn tde_alpha_zero_is_plain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for &k in &[1usize, 2, 4] {
            let head =
                HeadParams::random(HeadVariant::Deconfound, 5, 8, k, 16.0, 1.0 / 32.0, 1.0, &mut rng).unwrap();
            let dirs = random_dirs(k, 8 / k, &mut rng);
            for _ in 0..20 {
                let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let plain = head.logits(&x).unwrap();
                let tde = tde_logits(&x, &head, &dirs, 0.0).unwrap();
                assert_eq!(plain, tde);
            }
        }
    }

    #[test]
    fn tde_parallel_input_cancels_exactly() {
        // Axis-aligned per-group directions make the counterfactual component
        // bitwise equal to the input, so alpha = 1 cancels exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let k = 2;
        let gd = 4;
        let head =
            HeadParams::random(HeadVariant::Deconfound, 4, k * gd, k, 16.0, 1.0 / 32.0, 1.0, &mut rng).unwrap();
        let mut dirs = vec![vec![0.0; gd]; k];
        dirs[0][1] = 1.0;
        dirs[1][2] = 1.0;
        let c = 2.5;
        let mut x = vec![0.0; k * gd];
        x[1] = c;
        x[gd + 2] = c;
        let z = tde_logits(&x, &head, &dirs, 1.0).unwrap();
        for v in &z {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn tde_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for &k in &[1usize, 2, 4] {
            for _ in 0..50 {
                let dim = 8;
                let head =
                    HeadParams::random(HeadVariant::Deconfound, 5, dim, k, 16.0, 1.0 / 32.0, 1.0, &mut rng)
                        .unwrap();
                let dirs = random_dirs(k, dim / k, &mut rng);
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let z = tde_logits(&x, &head, &dirs, 3.0).unwrap();
                let rows: Vec<&[f64]> = (0..5).map(|i| head.weight.row(i)).collect();
                let oracle = tde_oracle(&x, &rows, &dirs, k, 16.0, 1.0 / 32.0, 3.0);
                for (a, b) in z.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-12, "K={k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn tde_counterfactual_identity() {
        // TDE(x) = plain(x) - counterfactual(x) at alpha = 1, where the
        // counterfactual logits keep only the head projection in the
        // numerator and the factual ||x^k|| in the denominator.
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let k = 2;
        let dim = 8;
        let gd = dim / k;
        let classes = 4;
        let head =
            HeadParams::random(HeadVariant::Deconfound, classes, dim, k, 16.0, 1.0 / 32.0, 1.0, &mut rng)
                .unwrap();
        let dirs = random_dirs(k, gd, &mut rng);
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tde = tde_logits(&x, &head, &dirs, 1.0).unwrap();
            let plain = head.logits(&x).unwrap();
            for i in 0..classes {
                let mut counterfactual = 0.0;
                for g in 0..k {
                    let xk = &x[g * gd..(g + 1) * gd];
                    let wk = &head.weight.row(i)[g * gd..(g + 1) * gd];
                    let dk = &dirs[g];
                    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    let proj = dot(xk, dk);
                    let dvec: Vec<f64> = dk.iter().map(|v| proj * v).collect();
                    let xn = dot(xk, xk).sqrt().max(1e-12);
                    let wn = dot(wk, wk).sqrt().max(1e-12);
                    counterfactual += dot(wk, &dvec) / ((wn + 1.0 / 32.0) * xn);
                }
                counterfactual *= 16.0 / k as f64;
                assert!((tde[i] - (plain[i] - counterfactual)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn background_exempted_hand_case() {
        let p = [0.5, 0.25, 0.25];
        let q = [0.2, 0.5, 0.3];
        let out = background_exempted(&p, &q).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.3125).abs() < 1e-12);
        assert!((out[2] - 0.1875).abs() < 1e-12);
    }

    #[test]
    fn background_exempted_degenerate_background() {
        let p = [0.5, 0.5];
        let q = [1.0, 0.0];
        assert!(background_exempted(&p, &q).is_err());
    }

    #[test]
    fn background_exempted_zero_background() {
        let p = [0.0, 0.6, 0.4];
        let q = [0.5, 0.25, 0.25];
        let out = background_exempted(&p, &q).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.5).abs() < 1e-12);
        assert!((out[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn background_exempted_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..500 {
            let c = rng.gen_range(2..8);
            let mut p: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut q: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let ps: f64 = p.iter().sum();
            let qs: f64 = q.iter().sum();
            p.iter_mut().for_each(|v| *v /= ps);
            q.iter_mut().for_each(|v| *v /= qs);
            let out = background_exempted(&p, &q).unwrap();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn background_exempted_invariant_to_foreground_rescale() {
        let q = [0.3, 0.4, 0.2, 0.1];
        let p = [0.6, 0.2, 0.1, 0.1];
        let base = background_exempted(&p, &q).unwrap();
        for c in [0.5, 2.0, 7.3] {
            let mut scaled: Vec<f64> = q.to_vec();
            for v in scaled[1..].iter_mut() {
                *v *= c;
            }
            let z: f64 = scaled.iter().sum();
            scaled.iter_mut().for_each(|v| *v /= z);
            let out = background_exempted(&p, &scaled).unwrap();
            for (a, b) in out.iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cde_weights_hand_cases() {
        assert_eq!(cde_class_weights(&[100, 100]).unwrap(), vec![1.0, 1.0]);
        let w = cde_class_weights(&[100, 10]).unwrap();
        assert!((w[0] - 2.0 / 11.0).abs() < 1e-12);
        assert!((w[1] - 20.0 / 11.0).abs() < 1e-12);
        assert_eq!(cde_class_weights(&[7]).unwrap(), vec![1.0]);
        assert!(cde_class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn cde_weights_mean_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        for _ in 0..50 {
            let counts: Vec<usize> = (0..10).map(|_| rng.gen_range(1..500)).collect();
            let w = cde_class_weights(&counts).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    // When the foreground TDE mass concentrates on one class, the
    // foreground/background decision reduces to argmax over (p0, 1 - p0).
    #[test]
    fn background_decision_reduces_to_binary_when_foreground_concentrates() {
        for &(p0, q0) in &[(0.7, 0.3), (0.3, 0.6), (0.5001, 0.2)] {
            let p = [p0, (1.0 - p0) / 2.0, (1.0 - p0) / 2.0];
            let q = [q0, 1.0 - q0, 0.0];
            let out = background_exempted(&p, &q).unwrap();
            let expect_bg = p0 > 1.0 - p0;
            assert_eq!(argmax(&out) == 0, expect_bg, "p0={p0} q0={q0} out={out:?}");
        }
    }

    // Full predict path on a hand-built model with a background dataset
    // shape: class 0 keeps its plain probability and the vector stays
    // normalized.
    #[test]
    fn predict_bg_exempt_outputs_probability_vector() {
        use crate::model::Model;
        use crate::numeric::{Activation, BackboneParams, Layer};
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let dim = 6;
        let backbone = BackboneParams::new(vec![Layer {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }])
        .unwrap();
        let head =
            HeadParams::random(HeadVariant::Deconfound, 4, dim, 2, 16.0, 1.0 / 32.0, 1.0, &mut rng)
                .unwrap();
        let model = Model::new(backbone, head).unwrap();
        let mut ema = crate::ema::EmaTracker::new(dim, 0.9).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.1..1.0)).collect();
            ema.update(&x).unwrap();
        }
        ema.freeze();
        let cfg = InferenceConfig::tde_bg_exempt(1.5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pred = predict(&x, &model, &ema, &cfg).unwrap();
            let sum: f64 = pred.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let (feature, _) = model.feature(&x).unwrap();
            let plain = softmax(&model.head.logits(&feature).unwrap());
            assert!((pred.probabilities[0] - plain[0]).abs() < 1e-15);
            assert_eq!(pred.class, argmax(&pred.probabilities));
        }
    }

    // Unfrozen trackers must be rejected by TDE-mode prediction.
    #[test]
    fn predict_tde_requires_frozen_tracker() {
        use crate::model::Model;
        use crate::numeric::{Activation, BackboneParams, Layer};
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let dim = 4;
        let backbone = BackboneParams::new(vec![Layer {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }])
        .unwrap();
        let head =
            HeadParams::random(HeadVariant::Deconfound, 3, dim, 1, 16.0, 0.0, 1.0, &mut rng).unwrap();
        let model = Model::new(backbone, head).unwrap();
        let mut ema = crate::ema::EmaTracker::new(dim, 0.9).unwrap();
        ema.update(&[1.0, 0.5, 0.25, 0.1]).unwrap();
        let x = [0.4, 0.3, 0.2, 0.1];
        assert!(predict(&x, &model, &ema, &InferenceConfig::tde(1.0)).is_err());
        ema.freeze();
        assert!(predict(&x, &model, &ema, &InferenceConfig::tde(1.0)).is_ok());
    }
}
