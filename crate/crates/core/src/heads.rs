//! The classifier zoo.
//!
//! Every head computes logits of the general normalized form
//!
//! ```text
//! z_i = (tau / K) * sum_k  (w_i^k . x^k) / N(x^k, w_i^k)
//! ```
//!
//! where weights and features are split channel-wise into K equal groups and
//! N is the variant's normalizer:
//!
//! - `deconfound`: (||w|| + gamma) * ||x||
//! - `cosine`:     ||w|| * ||x||
//! - `capsule`:    (||x|| + 1) * ||w||
//! - `tau_norm`:   ||w||^t with t in [0, 1]
//! - `lws`:        g_i, a per-class learnable scale
//! - `linear`:     1, with tau fixed at 1 and a per-class bias added
//!
//! Norms that appear as divisors are floored at [`NORM_EPS`], so a zero
//! feature yields all-zero logits instead of an error.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{dot, guard_norm, l2_norm, Matrix, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadVariant {
    Linear,
    Cosine,
    Capsule,
    TauNorm,
    Lws,
    Deconfound,
}

impl HeadVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Linear => "linear",
            HeadVariant::Cosine => "cosine",
            HeadVariant::Capsule => "capsule",
            HeadVariant::TauNorm => "tau_norm",
            HeadVariant::Lws => "lws",
            HeadVariant::Deconfound => "deconfound",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => HeadVariant::Linear,
            "cosine" => HeadVariant::Cosine,
            "capsule" => HeadVariant::Capsule,
            "tau_norm" => HeadVariant::TauNorm,
            "lws" => HeadVariant::Lws,
            "deconfound" => HeadVariant::Deconfound,
            other => return Err(Error::InvalidConfig(format!("unknown head variant '{other}'"))),
        })
    }

    pub const ALL: [HeadVariant; 6] = [
        HeadVariant::Linear,
        HeadVariant::Cosine,
        HeadVariant::Capsule,
        HeadVariant::TauNorm,
        HeadVariant::Lws,
        HeadVariant::Deconfound,
    ];
}

/// Classifier parameters: one weight row per class plus the variant's
/// hyperparameters. `tau`, `gamma` and `groups` are fixed at construction,
/// never learned.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub variant: HeadVariant,
    /// classes x feature_dim
    pub weight: Matrix,
    /// Per-class bias; present iff variant is `Linear`.
    pub bias: Option<Vec<f64>>,
    /// Per-class scales g_i; present iff variant is `Lws`.
    pub class_scales: Option<Vec<f64>>,
    /// K: number of channel groups; feature_dim must be divisible by it.
    pub groups: usize,
    /// Logit scale (inverse temperature). Ignored by `Linear` (fixed at 1).
    pub tau: f64,
    /// Class-agnostic baseline energy added to ||w|| (deconfound only).
    pub gamma: f64,
    /// Weight-norm exponent for the `tau_norm` variant.
    pub tau_norm_exp: f64,
}

/// Gradients of the logits' scalar contraction with an upstream gradient
/// vector: d(sum_i go_i * z_i)/d{W, bias, scales, x}.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub class_scales: Option<Vec<f64>>,
    pub input: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &HeadParams) -> Self {
        HeadGrads {
            weight: Matrix::zeros(head.classes(), head.dim()),
            bias: head.bias.as_ref().map(|b| vec![0.0; b.len()]),
            class_scales: head.class_scales.as_ref().map(|s| vec![0.0; s.len()]),
            input: vec![0.0; head.dim()],
        }
    }

    pub fn accumulate(&mut self, other: &HeadGrads, scale: f64) {
        for (v, o) in self.weight.data_mut().iter_mut().zip(other.weight.data()) {
            *v += scale * o;
        }
        if let (Some(b), Some(ob)) = (self.bias.as_mut(), other.bias.as_ref()) {
            for (v, o) in b.iter_mut().zip(ob) {
                *v += scale * o;
            }
        }
        if let (Some(s), Some(os)) = (self.class_scales.as_mut(), other.class_scales.as_ref()) {
            for (v, o) in s.iter_mut().zip(os) {
                *v += scale * o;
            }
        }
    }
}

/// Split a vector into K contiguous equal channel groups.
/// Concatenating the returned slices in order reconstructs the input.
pub fn split_channels(x: &[f64], groups: usize) -> Result<Vec<&[f64]>> {
    if groups == 0 {
        return Err(Error::InvalidConfig("group count must be >= 1".into()));
    }
    if !x.len().is_multiple_of(groups) {
        return Err(Error::shape(
            "split_channels",
            format!("length divisible by {groups}"),
            x.len(),
        ));
    }
    Ok(x.chunks_exact(x.len() / groups).collect())
}

impl HeadParams {
    /// Weights initialized uniform in [-1/sqrt(dim), 1/sqrt(dim)]; linear gets
    /// a zero bias row, LWS gets unit scales.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        variant: HeadVariant,
        classes: usize,
        dim: usize,
        groups: usize,
        tau: f64,
        gamma: f64,
        tau_norm_exp: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let weight = Matrix::from_fn(classes, dim, |_, _| rng.gen_range(-bound..bound));
        HeadParams::new(variant, weight, groups, tau, gamma, tau_norm_exp)
    }

    pub fn new(
        variant: HeadVariant,
        weight: Matrix,
        groups: usize,
        tau: f64,
        gamma: f64,
        tau_norm_exp: f64,
    ) -> Result<Self> {
        let classes = weight.rows();
        let dim = weight.cols();
        if groups == 0 || !dim.is_multiple_of(groups) {
            return Err(Error::InvalidConfig(format!(
                "feature dim {dim} not divisible by {groups} groups"
            )));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
        }
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&tau_norm_exp) {
            return Err(Error::InvalidConfig(format!(
                "tau_norm exponent must be in [0,1], got {tau_norm_exp}"
            )));
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite("head weight".into()));
        }
        Ok(HeadParams {
            variant,
            bias: (variant == HeadVariant::Linear).then(|| vec![0.0; classes]),
            class_scales: (variant == HeadVariant::Lws).then(|| vec![1.0; classes]),
            weight,
            groups,
            tau,
            gamma,
            tau_norm_exp,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn group_dim(&self) -> usize {
        self.dim() / self.groups
    }

    /// Effective logit scale: 1 for linear, `tau` otherwise.
    fn scale_tau(&self) -> f64 {
        if self.variant == HeadVariant::Linear {
            1.0
        } else {
            self.tau
        }
    }

    /// The variant's normalizer N(x^k, w_i^k) for one group of one class.
    fn normalizer(&self, class: usize, x_norm: f64, w_norm: f64) -> f64 {
        match self.variant {
            HeadVariant::Deconfound => (guard_norm(w_norm) + self.gamma) * guard_norm(x_norm),
            HeadVariant::Cosine => guard_norm(w_norm) * guard_norm(x_norm),
            HeadVariant::Capsule => (x_norm + 1.0) * guard_norm(w_norm),
            HeadVariant::TauNorm => guard_norm(w_norm).powf(self.tau_norm_exp),
            HeadVariant::Lws => {
                let g = self.class_scales.as_ref().expect("lws scales")[class];
                if g.abs() < NORM_EPS {
                    NORM_EPS
                } else {
                    g
                }
            }
            HeadVariant::Linear => 1.0,
        }
    }

    /// Logits for a feature vector; dispatches on the variant.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.logits_with_counterfactual(x, None, 0.0)
    }

    /// Shared forward path. When `head_dirs` is given, each group's numerator
    /// becomes `w.(x - alpha*d)` with `d` the projection of `x^k` onto the
    /// group's unit head direction; the denominator keeps the factual `||x^k||`.
    /// This is the counterfactual subtraction used by TDE inference.
    pub(crate) fn logits_with_counterfactual(
        &self,
        x: &[f64],
        head_dirs: Option<&[Vec<f64>]>,
        alpha: f64,
    ) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape("head logits", self.dim(), x.len()));
        }
        let x_groups = split_channels(x, self.groups)?;
        if let Some(dirs) = head_dirs {
            if dirs.len() != self.groups {
                return Err(Error::shape("head directions", self.groups, dirs.len()));
            }
            for d in dirs {
                if d.len() != self.group_dim() {
                    return Err(Error::shape("head direction dim", self.group_dim(), d.len()));
                }
            }
        }
        let classes = self.classes();
        let mut logits = vec![0.0; classes];
        // Per-group counterfactual component d^k = (x^k . dhat^k) dhat^k.
        let proj: Vec<Vec<f64>> = match head_dirs {
            Some(dirs) => x_groups
                .iter()
                .zip(dirs)
                .map(|(xk, dk)| {
                    let p = dot(xk, dk);
                    dk.iter().map(|v| p * v).collect()
                })
                .collect(),
            None => Vec::new(),
        };
        for (k, xk) in x_groups.iter().enumerate() {
            let x_norm = l2_norm(xk);
            for i in 0..classes {
                let wk = &self.weight.row(i)[k * self.group_dim()..(k + 1) * self.group_dim()];
                let w_norm = l2_norm(wk);
                let mut num = dot(wk, xk);
                if head_dirs.is_some() {
                    num -= alpha * dot(wk, &proj[k]);
                }
                logits[i] += num / self.normalizer(i, x_norm, w_norm);
            }
        }
        let scale = self.scale_tau() / self.groups as f64;
        for (i, z) in logits.iter_mut().enumerate() {
            *z *= scale;
            if let Some(bias) = &self.bias {
                *z += bias[i];
            }
        }
        Ok(logits)
    }

    /// Exact analytic gradients of `sum_i grad_logits[i] * z_i` w.r.t. the
    /// weights, auxiliary parameters, and the input feature.
    pub fn backward(&self, x: &[f64], grad_logits: &[f64]) -> Result<HeadGrads> {
        if x.len() != self.dim() {
            return Err(Error::shape("head backward input", self.dim(), x.len()));
        }
        if grad_logits.len() != self.classes() {
            return Err(Error::shape("head backward logits", self.classes(), grad_logits.len()));
        }
        let gd = self.group_dim();
        let x_groups = split_channels(x, self.groups)?;
        let scale = self.scale_tau() / self.groups as f64;
        let mut grads = HeadGrads::zeros_like(self);

        for (k, xk) in x_groups.iter().enumerate() {
            let x_norm = l2_norm(xk);
            for i in 0..self.classes() {
                let go = grad_logits[i];
                if go == 0.0 {
                    continue;
                }
                let wk = &self.weight.row(i)[k * gd..(k + 1) * gd];
                let w_norm = l2_norm(wk);
                let num = dot(wk, xk);
                let denom = self.normalizer(i, x_norm, w_norm);
                let coef = scale * go;

                // d(num)/dw = x, d(num)/dx = w.
                let gw_slice = &mut grads.weight.row_mut(i)[k * gd..(k + 1) * gd];
                for j in 0..gd {
                    gw_slice[j] += coef * xk[j] / denom;
                }
                let gx_slice = &mut grads.input[k * gd..(k + 1) * gd];
                for j in 0..gd {
                    gx_slice[j] += coef * wk[j] / denom;
                }

                // Denominator terms. Gradients through a norm are zero inside
                // the guard region (norm < NORM_EPS), matching the flat guard.
                let dw_coef = -coef * num / (denom * denom); // multiplies dN/dw
                let dx_coef = dw_coef; // multiplies dN/dx
                match self.variant {
                    HeadVariant::Deconfound | HeadVariant::Cosine => {
                        if w_norm > NORM_EPS {
                            let f = guard_norm(x_norm); // dN/d||w||
                            let gw_slice = &mut grads.weight.row_mut(i)[k * gd..(k + 1) * gd];
                            for j in 0..gd {
                                gw_slice[j] += dw_coef * f * wk[j] / w_norm;
                            }
                        }
                        if x_norm > NORM_EPS {
                            let f = guard_norm(w_norm)
                                + if self.variant == HeadVariant::Deconfound {
                                    self.gamma
                                } else {
                                    0.0
                                };
                            let gx_slice = &mut grads.input[k * gd..(k + 1) * gd];
                            for j in 0..gd {
                                gx_slice[j] += dx_coef * f * xk[j] / x_norm;
                            }
                        }
                    }
                    HeadVariant::Capsule => {
                        if w_norm > NORM_EPS {
                            let gw_slice = &mut grads.weight.row_mut(i)[k * gd..(k + 1) * gd];
                            for j in 0..gd {
                                gw_slice[j] += dw_coef * (x_norm + 1.0) * wk[j] / w_norm;
                            }
                        }
                        if x_norm > NORM_EPS {
                            let gx_slice = &mut grads.input[k * gd..(k + 1) * gd];
                            for j in 0..gd {
                                gx_slice[j] += dx_coef * guard_norm(w_norm) * xk[j] / x_norm;
                            }
                        }
                    }
                    HeadVariant::TauNorm => {
                        if w_norm > NORM_EPS && self.tau_norm_exp > 0.0 {
                            let t = self.tau_norm_exp;
                            let dn_dwnorm = t * w_norm.powf(t - 1.0);
                            let gw_slice = &mut grads.weight.row_mut(i)[k * gd..(k + 1) * gd];
                            for j in 0..gd {
                                gw_slice[j] += dw_coef * dn_dwnorm * wk[j] / w_norm;
                            }
                        }
                    }
                    HeadVariant::Lws => {
                        let g = self.class_scales.as_ref().expect("lws scales")[i];
                        if g.abs() >= NORM_EPS {
                            grads.class_scales.as_mut().unwrap()[i] += dw_coef;
                        }
                    }
                    HeadVariant::Linear => {}
                }
            }
        }
        if let Some(gb) = grads.bias.as_mut() {
            for (g, go) in gb.iter_mut().zip(grad_logits) {
                *g += go;
            }
        }
        Ok(grads)
    }

    /// Mutable parameter views for the optimizer. Order: weight, then bias or
    /// scales when present.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.weight.data_mut()];
        if let Some(b) = self.bias.as_mut() {
            out.push(b.as_mut_slice());
        }
        if let Some(s) = self.class_scales.as_mut() {
            out.push(s.as_mut_slice());
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = vec![self.weight.data().len()];
        if let Some(b) = &self.bias {
            out.push(b.len());
        }
        if let Some(s) = &self.class_scales {
            out.push(s.len());
        }
        out
    }
}

/// Logits of the de-confounded multi-head classifier (the variant must match).
pub fn deconfound_logits(x: &[f64], head: &HeadParams) -> Result<Vec<f64>> {
    if head.variant != HeadVariant::Deconfound {
        return Err(Error::InvalidConfig(format!(
            "deconfound_logits called on '{}' head",
            head.variant.as_str()
        )));
    }
    head.logits(x)
}

/// Logits of any baseline normalized classifier (everything but deconfound).
pub fn baseline_logits(x: &[f64], head: &HeadParams) -> Result<Vec<f64>> {
    if head.variant == HeadVariant::Deconfound {
        return Err(Error::InvalidConfig(
            "baseline_logits called on deconfound head".into(),
        ));
    }
    head.logits(x)
}

pub fn grad_slices(grads: &HeadGrads) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![grads.weight.data()];
    if let Some(b) = &grads.bias {
        out.push(b.as_slice());
    }
    if let Some(s) = &grads.class_scales {
        out.push(s.as_slice());
    }
    out
}
