use crate::config::LossConfig;
use crate::decoder::LayerPrediction;
use crate::error::{Error, Result};
use crate::scene::SuperpointInstanceMasks;

/// Floor applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-7;

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// Mean binary cross-entropy over superpoints.
pub fn binary_cross_entropy(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&m, &g)| {
            let pos = if g != 0.0 { g * safe_ln(m) } else { 0.0 };
            let neg = if g != 1.0 { (1.0 - g) * safe_ln(1.0 - m) } else { 0.0 };
            -(pos + neg)
        })
        .sum();
    total / pred.len() as f64
}

/// Dice dissimilarity with +1 smoothing: `1 - 2(m·g + 1) / (|m| + |g| + 1)`.
pub fn smoothed_dice(pred: &[f64], gt: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(m, g)| m * g).sum();
    let sum_pred: f64 = pred.iter().sum();
    let sum_gt: f64 = gt.iter().sum();
    1.0 - 2.0 * (inter + 1.0) / (sum_pred + sum_gt + 1.0)
}

/// Mask matching cost: BCE plus smoothed dice.
pub fn mask_matching_cost(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "mask of {} superpoints against ground truth of {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(binary_cross_entropy(pred, gt) + smoothed_dice(pred, gt))
}

/// Pairwise costs `[K × N_gt]` with the two terms kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub proposals: usize,
    pub gts: usize,
    /// `-λ_cls · p_{i, c_k}`
    pub classification: Vec<f64>,
    /// `λ_mask · C^mask_{ik}`
    pub mask: Vec<f64>,
    pub total: Vec<f64>,
}

impl CostMatrix {
    pub fn at(&self, proposal: usize, gt: usize) -> f64 {
        self.total[proposal * self.gts + gt]
    }
}

pub fn matching_cost_matrix(
    pred: &LayerPrediction,
    gt_masks: &SuperpointInstanceMasks,
    gt_classes: &[usize],
    cfg: &LossConfig,
) -> Result<CostMatrix> {
    let k = pred.num_queries();
    let n_gt = gt_classes.len();
    if gt_masks.num_instances() != n_gt {
        return Err(Error::Contract(format!(
            "{} gt masks for {n_gt} gt classes",
            gt_masks.num_instances()
        )));
    }
    let mut classification = Vec::with_capacity(k * n_gt);
    let mut mask = Vec::with_capacity(k * n_gt);
    for i in 0..k {
        let m = pred.masks.row(i);
        for (g, &class) in gt_classes.iter().enumerate() {
            classification.push(-cfg.lambda_cls * pred.class_probs.at(i, class));
            mask.push(cfg.lambda_mask * mask_matching_cost(m, gt_masks.mask(g))?);
        }
    }
    let total = classification.iter().zip(&mask).map(|(a, b)| a + b).collect();
    Ok(CostMatrix {
        proposals: k,
        gts: n_gt,
        classification,
        mask,
        total,
    })
}
