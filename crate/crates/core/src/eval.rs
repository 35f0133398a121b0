//! Point-level average precision over IoU thresholds.

use std::fmt::Write as _;

use crate::error::Result;
use crate::inference::InstancePrediction;
use crate::scene::Scene;

/// Ground-truth instance as a sorted list of point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class: usize,
    pub points: Vec<usize>,
}

pub fn gt_instances(scene: &Scene) -> Result<Vec<GtInstance>> {
    let gt = scene.ground_truth()?;
    Ok((0..gt.num_instances())
        .map(|k| GtInstance {
            class: gt.classes[k],
            points: gt.instance_points(k),
        })
        .collect())
}

/// IoU thresholds 0.50, 0.55, ... 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// IoU of two ascending index lists.
pub fn point_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching of one class at one threshold. Returns the TP flag of
/// each prediction in score order and the number of gt instances.
fn match_class(
    preds: &[Vec<InstancePrediction>],
    gts: &[Vec<GtInstance>],
    class: usize,
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ps)| {
            ps.iter()
                .enumerate()
                .filter(|(_, p)| p.class == class)
                .map(move |(i, _)| (s, i))
        })
        .collect();
    // Stable sort keeps scene then emission order on ties.
    order.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let tp = order
        .iter()
        .map(|&(s, i)| {
            let Some(scene_gts) = gts.get(s) else {
                return false;
            };
            let pred = &preds[s][i];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in scene_gts.iter().enumerate() {
                if g.class != class || used[s][k] {
                    continue;
                }
                let iou = point_iou(&pred.points, &g.points);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, _)) => {
                    used[s][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, n_gt)
}

/// All-point interpolated area under the precision-recall curve.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // Precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP of one class at one threshold.
pub fn class_ap(preds: &[Vec<InstancePrediction>], gts: &[Vec<GtInstance>], class: usize, threshold: f64) -> f64 {
    let (tp, n_gt) = match_class(preds, gts, class, threshold);
    interpolated_ap(&tp, n_gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub num_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub precision: f64,
    pub recall: f64,
    /// Classes with at least one gt instance, ascending.
    pub per_class: Vec<ClassMetrics>,
}

fn present_classes(gts: &[Vec<GtInstance>]) -> Vec<usize> {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Precision and recall of one class at IoU 0.5 with the AP matching rule.
/// Precision is 0 when the class has no predictions.
fn class_precision_recall(preds: &[Vec<InstancePrediction>], gts: &[Vec<GtInstance>], class: usize) -> (f64, f64) {
    let (tp, n_gt) = match_class(preds, gts, class, 0.5);
    let hits = tp.iter().filter(|&&t| t).count() as f64;
    let precision = if tp.is_empty() { 0.0 } else { hits / tp.len() as f64 };
    let recall = if n_gt == 0 { 0.0 } else { hits / n_gt as f64 };
    (precision, recall)
}

/// Mean precision and recall at IoU 0.5 over classes with ground truth.
pub fn precision_recall(preds: &[Vec<InstancePrediction>], gts: &[Vec<GtInstance>]) -> (f64, f64) {
    let classes = present_classes(gts);
    if classes.is_empty() {
        return (0.0, 0.0);
    }
    let (p, r) = classes
        .iter()
        .map(|&c| class_precision_recall(preds, gts, c))
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    (p / classes.len() as f64, r / classes.len() as f64)
}

/// `preds[s]` and `gts[s]` belong to the same scene. Classes without any gt
/// instance are left out of every mean.
pub fn compute_ap(preds: &[Vec<InstancePrediction>], gts: &[Vec<GtInstance>]) -> ApResult {
    let thresholds = iou_thresholds();
    let per_class: Vec<ClassMetrics> = present_classes(gts)
        .into_iter()
        .map(|c| {
            let ap = thresholds.iter().map(|&t| class_ap(preds, gts, c, t)).sum::<f64>() / thresholds.len() as f64;
            let (precision, recall) = class_precision_recall(preds, gts, c);
            ClassMetrics {
                class: c,
                num_gt: gts.iter().flatten().filter(|g| g.class == c).count(),
                ap,
                ap50: class_ap(preds, gts, c, 0.5),
                ap25: class_ap(preds, gts, c, 0.25),
                precision,
                recall,
            }
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    ApResult {
        map: mean(|m| m.ap),
        ap50: mean(|m| m.ap50),
        ap25: mean(|m| m.ap25),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        per_class,
    }
}

impl ApResult {
    /// Plain-text table, one row per class then the means.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "class\tnum_gt\tAP\tAP50\tAP25\tprec50\trec50");
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                m.class, m.num_gt, m.ap, m.ap50, m.ap25, m.precision, m.recall
            );
        }
        let total: usize = self.per_class.iter().map(|m| m.num_gt).sum();
        let _ = writeln!(
            out,
            "mean\t{total}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.map, self.ap50, self.ap25, self.precision, self.recall
        );
        out
    }
}
