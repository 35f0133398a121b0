//! Training losses with per-head bipartite matching (deep supervision).

use super::cost::{matching_cost_matrix, LOG_EPS};
use super::hungarian::{hungarian_assign, Assignment};
use crate::config::{LossConfig, MaskLossKind};
use crate::decoder::{HeadVars, LayerPrediction};
use crate::error::{Error, Result};
use crate::scene::{project_instance_to_superpoints, Scene, SuperpointInstanceMasks};
use crate::tensor::{Tape, Tensor, Var};

/// Superpoint-level supervision of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    pub masks: SuperpointInstanceMasks,
    pub classes: Vec<usize>,
}

impl SceneTargets {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let masks = project_instance_to_superpoints(scene)?;
        let classes = scene.ground_truth()?.classes.clone();
        Ok(Self { masks, classes })
    }

    pub fn num_instances(&self) -> usize {
        self.classes.len()
    }

    /// Relabels ground-truth instances: new instance `i` is old `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            masks: self.masks.reordered(order),
            classes: order.iter().map(|&k| self.classes[k]).collect(),
        }
    }
}

/// Discrete choices behind one head's loss: the matching and the IoU
/// targets of the score branch. Both are held fixed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub assignment: Assignment,
    /// IoU between the binarized proposal mask and its gt, per pair.
    pub ious: Vec<f64>,
}

/// IoU of a proposal mask binarized at 0.5 against a binary gt mask.
pub fn binarized_iou(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &g) in pred.iter().zip(gt) {
        let p = m > 0.5;
        let t = g > 0.5;
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Runs matching for one head on detached predictions.
pub fn plan_head(pred: &LayerPrediction, targets: &SceneTargets, cfg: &LossConfig) -> Result<HeadTargets> {
    let costs = matching_cost_matrix(pred, &targets.masks, &targets.classes, cfg)?;
    let assignment = hungarian_assign(&costs.total, costs.proposals, costs.gts)?;
    let ious = assignment
        .pairs
        .iter()
        .map(|&(p, g)| binarized_iou(pred.masks.row(p), targets.masks.mask(g)))
        .collect();
    Ok(HeadTargets { assignment, ious })
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Cross-entropy over all proposals; unassigned proposals target the
/// "no instance" class at index `N_class`. Their terms are weighted by
/// `no_instance_weight` and the result is the weighted mean, so a weight of
/// one gives the plain mean over proposals.
pub fn classification_loss(
    tape: &mut Tape,
    head: &HeadVars,
    assignment: &Assignment,
    gt_classes: &[usize],
    no_instance_weight: f64,
) -> Result<Var> {
    let probs = tape.value(head.class_probs);
    let (k, width) = (probs.rows(), probs.cols());
    let no_instance = width - 1;
    let gt_of = assignment.gt_of_proposal(k);
    let idx: Vec<usize> = (0..k)
        .map(|i| i * width + gt_of[i].map_or(no_instance, |g| gt_classes[g]))
        .collect();
    let picked = tape.gather(head.class_probs, &idx)?;
    let logs = tape.clamp_ln(picked, LOG_EPS, f64::INFINITY);
    if no_instance_weight == 1.0 {
        let mean = tape.mean(logs);
        return Ok(tape.scale(mean, -1.0));
    }
    let weights: Vec<f64> = gt_of
        .iter()
        .map(|g| if g.is_some() { 1.0 } else { no_instance_weight })
        .collect();
    let norm: f64 = weights.iter().sum();
    let w = tape.constant(Tensor::vector(weights));
    let weighted = tape.mul(logs, w)?;
    let sum = tape.sum(weighted);
    Ok(tape.scale(sum, -1.0 / norm))
}

/// Mean BCE and mean smoothed dice over assigned pairs.
pub fn mask_loss(
    tape: &mut Tape,
    head: &HeadVars,
    assignment: &Assignment,
    gt_masks: &SuperpointInstanceMasks,
) -> Result<(Var, Var)> {
    if assignment.pairs.is_empty() {
        let z = zero(tape);
        return Ok((z, z));
    }
    let props: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let gts: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let pred = tape.gather_rows(head.masks, &props)?;
    let gt_t = gt_masks.as_tensor().select_rows(&gts);
    let inv_gt_t = Tensor::new(gt_t.shape().to_vec(), gt_t.data().iter().map(|g| 1.0 - g).collect())?;
    let gt_sums = Tensor::vector(gt_t.data().chunks(gt_t.cols().max(1)).map(|r| r.iter().sum()).collect());
    let gt = tape.constant(gt_t);
    let inv_gt = tape.constant(inv_gt_t);

    // BCE: -mean(g ln m + (1 - g) ln(1 - m))
    let ln_m = tape.clamp_ln(pred, LOG_EPS, f64::INFINITY);
    let one_minus = tape.affine(pred, -1.0, 1.0);
    let ln_1m = tape.clamp_ln(one_minus, LOG_EPS, f64::INFINITY);
    let pos = tape.mul(gt, ln_m)?;
    let neg = tape.mul(inv_gt, ln_1m)?;
    let both = tape.add(pos, neg)?;
    let bce = tape.mean(both);
    let bce = tape.scale(bce, -1.0);

    // Dice: mean_i [1 - 2(m_i·g_i + 1) / (|m_i| + |g_i| + 1)]
    let prod = tape.mul(pred, gt)?;
    let inter = tape.row_sum(prod);
    let numer = tape.affine(inter, 2.0, 2.0);
    let pred_sum = tape.row_sum(pred);
    let gt_sum = tape.constant(gt_sums);
    let denom = tape.add(pred_sum, gt_sum)?;
    let denom = tape.affine(denom, 1.0, 1.0);
    let ratio = tape.div(numer, denom)?;
    let per_pair = tape.affine(ratio, -1.0, 1.0);
    let dice = tape.mean(per_pair);
    Ok((bce, dice))
}

/// Mean squared error between predicted scores and IoU targets over pairs
/// whose IoU exceeds 0.5; zero if none qualify.
pub fn score_loss(tape: &mut Tape, head: &HeadVars, targets: &HeadTargets) -> Result<Var> {
    let (props, ious): (Vec<usize>, Vec<f64>) = targets
        .assignment
        .pairs
        .iter()
        .zip(&targets.ious)
        .filter(|(_, &iou)| iou > 0.5)
        .map(|(&(p, _), &iou)| (p, iou))
        .unzip();
    if props.is_empty() {
        return Ok(zero(tape));
    }
    let s = tape.gather(head.scores, &props)?;
    let target = tape.constant(Tensor::vector(ious));
    let diff = tape.sub(s, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Loss terms of one supervised head.
#[derive(Debug, Clone, Copy)]
pub struct HeadLoss {
    pub cls: Var,
    pub bce: Var,
    pub dice: Var,
    pub score: Var,
    pub total: Var,
}

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
    pub total: f64,
}

impl LossValues {
    /// `β_cls·L_cls + β_s·L_s + β_mask·(L_bce + L_dice)` for the selected
    /// mask-loss terms.
    pub fn weighted_total(cls: f64, score: f64, bce: f64, dice: f64, cfg: &LossConfig) -> f64 {
        let (use_bce, use_dice) = mask_terms(cfg.mask_loss);
        let mask = if use_bce { bce } else { 0.0 } + if use_dice { dice } else { 0.0 };
        let score = if cfg.score_loss { score } else { 0.0 };
        cfg.beta_cls * cls + cfg.beta_score * score + cfg.beta_mask * mask
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.bce, self.dice, self.score, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cls", self.cls),
            ("bce", self.bce),
            ("dice", self.dice),
            ("score", self.score),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn mask_terms(kind: MaskLossKind) -> (bool, bool) {
    match kind {
        MaskLossKind::BceDice => (true, true),
        MaskLossKind::Bce => (true, false),
        MaskLossKind::Dice => (false, true),
    }
}

pub struct LossBreakdown {
    /// Mean of the supervised heads' totals.
    pub total: Var,
    pub heads: Vec<HeadLoss>,
    /// Index into the decoder's prediction list of each supervised head.
    pub head_indices: Vec<usize>,
    /// Matching used by each supervised head.
    pub targets: Vec<HeadTargets>,
}

impl LossBreakdown {
    /// Term values averaged over supervised heads.
    pub fn values(&self, tape: &Tape) -> LossValues {
        let n = self.heads.len() as f64;
        let avg = |f: fn(&HeadLoss) -> Var| self.heads.iter().map(|h| tape.value(f(h)).item()).sum::<f64>() / n;
        LossValues {
            cls: avg(|h| h.cls),
            bce: avg(|h| h.bce),
            dice: avg(|h| h.dice),
            score: avg(|h| h.score),
            total: tape.value(self.total).item(),
        }
    }
}

/// Indices of the heads that receive supervision: all `L + 1` with
/// iterative prediction, otherwise only the last.
pub fn supervised_heads(num_heads: usize, iterative: bool) -> Vec<usize> {
    if iterative {
        (0..num_heads).collect()
    } else {
        vec![num_heads - 1]
    }
}

/// Builds the multi-task loss over supervised heads, matching each head
/// independently. Pass `frozen` to reuse previously computed matchings.
pub fn total_loss(
    tape: &mut Tape,
    heads: &[HeadVars],
    targets: &SceneTargets,
    cfg: &LossConfig,
    iterative: bool,
    frozen: Option<&[HeadTargets]>,
) -> Result<LossBreakdown> {
    if heads.is_empty() {
        return Err(Error::Contract("no prediction heads to supervise".into()));
    }
    let head_indices = supervised_heads(heads.len(), iterative);
    if let Some(f) = frozen {
        if f.len() != head_indices.len() {
            return Err(Error::Contract(format!(
                "{} frozen matchings for {} supervised heads",
                f.len(),
                head_indices.len()
            )));
        }
    }
    let (use_bce, use_dice) = mask_terms(cfg.mask_loss);
    let mut losses = Vec::with_capacity(head_indices.len());
    let mut plans = Vec::with_capacity(head_indices.len());
    for (slot, &hi) in head_indices.iter().enumerate() {
        let head = &heads[hi];
        let plan = match frozen {
            Some(f) => f[slot].clone(),
            None => plan_head(&LayerPrediction::from_tape(tape, head), targets, cfg)?,
        };
        let cls = classification_loss(tape, head, &plan.assignment, &targets.classes, cfg.no_instance_weight)?;
        let (bce, dice) = mask_loss(tape, head, &plan.assignment, &targets.masks)?;
        let score = score_loss(tape, head, &plan)?;

        let mut total = tape.scale(cls, cfg.beta_cls);
        if cfg.score_loss {
            let s = tape.scale(score, cfg.beta_score);
            total = tape.add(total, s)?;
        }
        if use_bce {
            let b = tape.scale(bce, cfg.beta_mask);
            total = tape.add(total, b)?;
        }
        if use_dice {
            let d = tape.scale(dice, cfg.beta_mask);
            total = tape.add(total, d)?;
        }
        losses.push(HeadLoss {
            cls,
            bce,
            dice,
            score,
            total,
        });
        plans.push(plan);
    }
    let mut sum = losses[0].total;
    for l in &losses[1..] {
        sum = tape.add(sum, l.total)?;
    }
    let total = tape.scale(sum, 1.0 / losses.len() as f64);
    Ok(LossBreakdown {
        total,
        heads: losses,
        head_indices,
        targets: plans,
    })
}
