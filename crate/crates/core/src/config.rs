//! Model and loss hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone output width `C`.
    pub feature_dim: usize,
    /// Backbone hidden width `H`.
    pub hidden_dim: usize,
    /// Decoder embedding width `D`.
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Number of decoder layers `L`.
    pub layers: usize,
    /// Number of query vectors `K`.
    pub queries: usize,
    pub num_classes: usize,
    /// Attention-mask threshold.
    pub tau: f64,
    pub attention_mask: bool,
    pub iterative_prediction: bool,
    pub cross_attention_first: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 64,
            embed_dim: 32,
            heads: 4,
            ffn_dim: 64,
            layers: 3,
            queries: 20,
            num_classes: 4,
            tau: 0.5,
            attention_mask: true,
            iterative_prediction: true,
            cross_attention_first: true,
        }
    }
}

impl ModelConfig {
    /// Six layers and 400 queries, the best depth and query count of the
    /// full-scale layer/query ablation.
    pub fn large_preset() -> Self {
        Self {
            layers: 6,
            queries: 400,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("queries", self.queries),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.embed_dim {} is not divisible by model.heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("model.tau {} must lie in (0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// Which terms make up the mask loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLossKind {
    BceDice,
    Bce,
    Dice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub beta_cls: f64,
    pub beta_score: f64,
    pub beta_mask: f64,
    pub mask_loss: MaskLossKind,
    /// Supervise the IoU-aware score branch.
    pub score_loss: bool,
    /// Relative weight of "no instance" targets in the classification loss.
    pub no_instance_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 0.5,
            lambda_mask: 1.0,
            beta_cls: 0.5,
            beta_score: 0.5,
            beta_mask: 1.0,
            mask_loss: MaskLossKind::BceDice,
            score_loss: true,
            no_instance_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let coefficients = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_mask", self.lambda_mask),
            ("beta_cls", self.beta_cls),
            ("beta_score", self.beta_score),
            ("beta_mask", self.beta_mask),
        ];
        if let Some((name, v)) = coefficients.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss.{name} {v} must be finite and non-negative"
            )));
        }
        if !(self.no_instance_weight.is_finite() && self.no_instance_weight > 0.0) {
            return Err(Error::Config(format!(
                "loss.no_instance_weight {} must be finite and positive",
                self.no_instance_weight
            )));
        }
        Ok(())
    }
}
