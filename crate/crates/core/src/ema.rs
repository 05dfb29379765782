//! Exponential moving average of features, the source of the head direction.
//!
//! The tracker accumulates `running <- decay * running + feature` once per
//! training iteration (the batch-mean feature). The running sum is never
//! renormalized; only its direction is consumed. After training it is frozen
//! and becomes read-only.

use crate::error::{Error, Result};
use crate::numeric::{dot, guard_norm, l2_norm, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct EmaTracker {
    running: Vec<f64>,
    decay: f64,
    updates: u64,
    frozen: bool,
}

impl EmaTracker {
    pub fn new(dim: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!("ema decay must be in [0,1), got {decay}")));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("ema dim must be >= 1".into()));
        }
        Ok(EmaTracker { running: vec![0.0; dim], decay, updates: 0, frozen: false })
    }

    /// Rebuild a tracker from checkpointed fields.
    pub fn from_parts(running: Vec<f64>, decay: f64, updates: u64, frozen: bool) -> Result<Self> {
        if running.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ema running sum".into()));
        }
        Ok(EmaTracker { running, decay, updates, frozen })
    }

    pub fn dim(&self) -> usize {
        self.running.len()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn running(&self) -> &[f64] {
        &self.running
    }

    pub fn update(&mut self, feature: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::TrackerState("update on a frozen tracker".into()));
        }
        if feature.len() != self.running.len() {
            return Err(Error::shape("ema update", self.running.len(), feature.len()));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ema update feature".into()));
        }
        for (r, f) in self.running.iter_mut().zip(feature) {
            *r = self.decay * *r + f;
        }
        self.updates += 1;
        Ok(())
    }

    /// Freezing is idempotent; a frozen tracker never changes again.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// The unit head direction. Undefined (an error) before the first update
    /// or when the running sum is numerically zero.
    pub fn head_direction(&self) -> Result<Vec<f64>> {
        if self.updates == 0 {
            return Err(Error::TrackerState("head direction requested before any update".into()));
        }
        let norm = l2_norm(&self.running);
        if norm < NORM_EPS {
            return Err(Error::TrackerState("running mean has vanishing norm".into()));
        }
        Ok(self.running.iter().map(|v| v / norm).collect())
    }

    /// Per-group unit directions: the running sum is split into K contiguous
    /// channel groups and each slice is normalized independently.
    pub fn head_direction_groups(&self, groups: usize) -> Result<Vec<Vec<f64>>> {
        if self.updates == 0 {
            return Err(Error::TrackerState("head direction requested before any update".into()));
        }
        if groups == 0 || !self.running.len().is_multiple_of(groups) {
            return Err(Error::shape(
                "head direction groups",
                format!("dim divisible by {groups}"),
                self.running.len(),
            ));
        }
        let gd = self.running.len() / groups;
        let mut out = Vec::with_capacity(groups);
        for k in 0..groups {
            let slice = &self.running[k * gd..(k + 1) * gd];
            let norm = l2_norm(slice);
            if norm < NORM_EPS {
                return Err(Error::TrackerState(format!("group {k} has vanishing norm")));
            }
            out.push(slice.iter().map(|v| v / norm).collect());
        }
        Ok(out)
    }
}

/// x split into a discriminative component and its projection on the head
/// direction: x = discriminative + head_component.
#[derive(Debug, Clone)]
pub struct FeatureDecomposition {
    /// The component orthogonal to the head direction.
    pub discriminative: Vec<f64>,
    /// The projection (x . dhat) dhat.
    pub head_component: Vec<f64>,
    /// cos(x, dhat), with the zero-vector guard on ||x||.
    pub cos_to_head: f64,
}

/// Decompose `x` against a unit head direction.
pub fn decompose(x: &[f64], head_dir: &[f64]) -> Result<FeatureDecomposition> {
    if x.len() != head_dir.len() {
        return Err(Error::shape("decompose", head_dir.len(), x.len()));
    }
    let dir_norm = l2_norm(head_dir);
    if (dir_norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "head direction must be unit length, got norm {dir_norm}"
        )));
    }
    let proj = dot(x, head_dir);
    let head_component: Vec<f64> = head_dir.iter().map(|v| proj * v).collect();
    let discriminative: Vec<f64> = x.iter().zip(&head_component).map(|(a, b)| a - b).collect();
    let cos_to_head = proj / guard_norm(l2_norm(x));
    Ok(FeatureDecomposition { discriminative, head_component, cos_to_head })
}
