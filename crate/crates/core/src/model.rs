//! A trained classifier: backbone plus head.

use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::numeric::{ActivationCache, BackboneParams};

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

impl Model {
    pub fn new(backbone: BackboneParams, head: HeadParams) -> Result<Self> {
        if backbone.feature_dim() != head.dim() {
            return Err(Error::shape("model feature dim", head.dim(), backbone.feature_dim()));
        }
        Ok(Model { backbone, head })
    }

    pub fn feature(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationCache)> {
        self.backbone.forward(x)
    }

    /// Plain (non-counterfactual) logits for a raw input.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (feature, _) = self.backbone.forward(x)?;
        self.head.logits(&feature)
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }
}
