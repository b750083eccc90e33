//! Head outputs to final detections.

use serde::{Deserialize, Serialize};

use crate::boxes::{decode, iou, CornerBox, Variances};
use crate::error::{Error, Result};
use crate::multibox::PriorBoxSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// In `1..=K`.
    pub category: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: CornerBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub top_k_per_class: usize,
    pub max_total: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            conf_threshold: 0.01,
            nms_iou: 0.45,
            top_k_per_class: 200,
            max_total: 200,
        }
    }
}

/// Indices sorted by descending score, equal scores by ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in keep order.
pub fn nms(boxes: &[CornerBox], scores: &[f64], iou_threshold: f64, top_k: usize) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let order = rank_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if keep.len() >= top_k {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Row-wise softmax of a `(rows, classes)` matrix.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Detections for one image from its `(priors, 4)` offsets and
/// `(priors, K)` logits.
pub fn assemble_detections(
    loc: &[f64],
    conf: &[f64],
    classes: usize,
    priors: &PriorBoxSet,
    variances: &Variances,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let p = priors.len();
    if loc.len() != p * 4 || conf.len() != p * classes {
        return Err(Error::shape(
            "assemble_detections",
            format!("{} offsets / {} logits for {p} priors", loc.len(), conf.len()),
        ));
    }
    let probs = softmax_rows(conf, classes);
    let mut all = Vec::new();
    for c in 1..classes {
        let cand: Vec<usize> = (0..p).filter(|&i| probs[i * classes + c] >= cfg.conf_threshold).collect();
        let boxes: Vec<CornerBox> = cand
            .iter()
            .map(|&i| decode(loc[i * 4..i * 4 + 4].try_into().expect("4 offsets"), &priors.boxes[i], variances))
            .collect();
        let scores: Vec<f64> = cand.iter().map(|&i| probs[i * classes + c]).collect();
        for k in nms(&boxes, &scores, cfg.nms_iou, cfg.top_k_per_class) {
            all.push(Detection {
                category: c,
                score: scores[k],
                bbox: boxes[k],
            });
        }
    }
    let scores: Vec<f64> = all.iter().map(|d| d.score).collect();
    let mut ranked: Vec<Detection> = rank_by_score(&scores).into_iter().map(|i| all[i].clone()).collect();
    ranked.truncate(cfg.max_total);
    Ok(ranked)
}
