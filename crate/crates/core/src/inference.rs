//! NMS-free proposal ranking and the prediction / attention-dump formats.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::LayerPrediction;
use crate::error::{Error, Result};
use crate::scene::SuperpointPartition;
use crate::tensor::Tensor;

/// Mean of the superpoint probabilities strictly above 0.5, or 0 if none.
pub fn mask_score(mask_probs: &[f64]) -> f64 {
    let (sum, n) = mask_probs
        .iter()
        .filter(|&&p| p > 0.5)
        .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Ranking score `cbrt(p · s · ms)`.
pub fn final_score(class_prob: f64, score: f64, mask_score: f64) -> f64 {
    (class_prob * score * mask_score).cbrt()
}

/// One emitted instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub class: usize,
    pub score: f64,
    /// Ascending indices of the points in the mask.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitConfig {
    pub score_floor: f64,
    /// Maximum number of proposals kept; `None` keeps all.
    pub top_n: Option<usize>,
}

impl Default for EmitConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.0,
            top_n: None,
        }
    }
}

/// Scored proposal from one query before filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub query: usize,
    pub class: usize,
    pub score: f64,
    /// Superpoint mask binarized at 0.5.
    pub superpoints: Vec<bool>,
}

/// One candidate per query, in query order.
pub fn score_candidates(pred: &LayerPrediction) -> Vec<Candidate> {
    let n_class = pred.num_classes();
    (0..pred.num_queries())
        .map(|q| {
            let probs = &pred.class_probs.row(q)[..n_class];
            // First maximum wins on ties.
            let (class, p) =
                probs.iter().copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, p)| if p > best.1 { (c, p) } else { best },
                );
            let mask = pred.masks.row(q);
            Candidate {
                query: q,
                class,
                score: final_score(p, pred.scores[q], mask_score(mask)),
                superpoints: mask.iter().map(|&m| m > 0.5).collect(),
            }
        })
        .collect()
}

/// Sorts candidates by score (ties by query index), drops empty masks and
/// scores below the floor, and truncates to `top_n`. Overlapping proposals
/// are all kept.
pub fn rank_and_emit(
    pred: &LayerPrediction,
    partition: &SuperpointPartition,
    cfg: &EmitConfig,
) -> Vec<InstancePrediction> {
    let mut candidates = score_candidates(pred);
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    let mut out = Vec::new();
    for c in candidates {
        if c.score < cfg.score_floor {
            continue;
        }
        let points: Vec<usize> = partition
            .ids()
            .iter()
            .enumerate()
            .filter(|(_, &sp)| c.superpoints[sp])
            .map(|(i, _)| i)
            .collect();
        if points.is_empty() {
            continue;
        }
        out.push(InstancePrediction {
            class: c.class,
            score: c.score,
            points,
        });
        if cfg.top_n.is_some_and(|n| out.len() >= n) {
            break;
        }
    }
    out
}

/// Prediction file of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub scene: String,
    pub instances: Vec<InstancePrediction>,
}

impl PredictionFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{{");
        let _ = writeln!(
            out,
            "  \"scene\": {},",
            serde_json::to_string(&self.scene).expect("string")
        );
        let _ = writeln!(out, "  \"instances\": [");
        for (i, inst) in self.instances.iter().enumerate() {
            let sep = if i + 1 < self.instances.len() { "," } else { "" };
            let _ = writeln!(out, "    {}{sep}", serde_json::to_string(inst).expect("serializable"));
        }
        let _ = writeln!(out, "  ]");
        let _ = writeln!(out, "}}");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })
    }
}

fn fmt_row(out: &mut String, label: &str, values: impl Iterator<Item = f64>) {
    out.push_str(label);
    for v in values {
        let _ = write!(out, "\t{v:.6}");
    }
    out.push('\n');
}

/// Attention table of one decoder layer: per query, the superpoint weights
/// followed by the same weights copied to each member point.
pub fn attention_table(layer: usize, weights: &Tensor, partition: &SuperpointPartition) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# layer {layer}: {} queries, {} superpoints, {} points",
        weights.rows(),
        weights.cols(),
        partition.len()
    );
    let _ = writeln!(out, "# superpoint weights");
    for q in 0..weights.rows() {
        fmt_row(&mut out, &format!("q{q}"), weights.row(q).iter().copied());
    }
    let _ = writeln!(out, "# point weights");
    for q in 0..weights.rows() {
        let row = weights.row(q);
        fmt_row(&mut out, &format!("q{q}"), partition.ids().iter().map(|&sp| row[sp]));
    }
    out
}
