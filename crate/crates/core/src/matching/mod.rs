//! Proposal-to-instance matching and the multi-task training loss.

mod cost;
mod hungarian;
mod loss;

pub use cost::{binary_cross_entropy, mask_matching_cost, matching_cost_matrix, smoothed_dice, CostMatrix, LOG_EPS};
pub use hungarian::{hungarian_assign, Assignment};
pub use loss::{
    binarized_iou, classification_loss, mask_loss, plan_head, score_loss, supervised_heads, total_loss, HeadLoss,
    HeadTargets, LossBreakdown, LossValues, SceneTargets,
};
