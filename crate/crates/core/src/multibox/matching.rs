//! Ground-truth to prior assignment.

use serde::{Deserialize, Serialize};

use crate::boxes::{encode, iou, is_well_formed, to_corner, CornerBox, Variances};
use crate::error::{Error, Result};
use crate::multibox::priors::PriorBoxSet;

/// Annotations of one image. Labels are in `1..=K`; 0 is background.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<CornerBox>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<CornerBox>, labels: Vec<usize>) -> Result<Self> {
        let gt = GroundTruth { boxes, labels };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::invalid("GroundTruth", "boxes and labels differ in length"));
        }
        if let Some(i) = self.boxes.iter().position(|b| !is_well_formed(b)) {
            return Err(Error::invalid("GroundTruth", format!("box {i} is degenerate or outside [0,1]")));
        }
        if self.labels.contains(&0) {
            return Err(Error::invalid("GroundTruth", "label 0 is reserved for background"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched GT index per prior; `None` is background.
    pub matched: Vec<Option<usize>>,
    /// Class target per prior (0 for background).
    pub labels: Vec<usize>,
    /// Encoded regression target per prior (zeros for background).
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_positive(&self, prior: usize) -> bool {
        self.matched[prior].is_some()
    }
}

/// Two-step matching.
///
/// Forced step: repeatedly take the highest-IoU pair among GTs without a
/// forced prior and priors not yet claimed (ties: lowest GT, then lowest
/// prior), so every GT receives a distinct prior whenever there are enough
/// priors. Threshold step: every other prior takes its highest-IoU GT
/// (ties: lowest GT index) when that IoU reaches `iou_threshold`.
pub fn match_priors(gt: &GroundTruth, priors: &PriorBoxSet, iou_threshold: f64, v: &Variances) -> MatchResult {
    let p = priors.len();
    let mut matched: Vec<Option<usize>> = vec![None; p];
    if !gt.is_empty() {
        let corners: Vec<CornerBox> = priors.boxes.iter().map(to_corner).collect();
        let ious: Vec<Vec<f64>> = gt.boxes.iter().map(|g| corners.iter().map(|c| iou(g, c)).collect()).collect();

        let mut forced = vec![false; p];
        let mut done = vec![false; gt.len()];
        for _ in 0..gt.len().min(p) {
            let mut best: Option<(f64, usize, usize)> = None;
            for (gi, row) in ious.iter().enumerate() {
                if done[gi] {
                    continue;
                }
                for (pi, &v) in row.iter().enumerate() {
                    if !forced[pi] && best.is_none_or(|(bv, _, _)| v > bv) {
                        best = Some((v, gi, pi));
                    }
                }
            }
            let (_, gi, pi) = best.expect("unclaimed pair exists");
            done[gi] = true;
            forced[pi] = true;
            matched[pi] = Some(gi);
        }

        for pi in 0..p {
            if forced[pi] {
                continue;
            }
            let mut best = (f64::NEG_INFINITY, 0);
            for (gi, row) in ious.iter().enumerate() {
                if row[pi] > best.0 {
                    best = (row[pi], gi);
                }
            }
            if best.0 >= iou_threshold {
                matched[pi] = Some(best.1);
            }
        }
    }
    let labels = matched.iter().map(|m| m.map_or(0, |g| gt.labels[g])).collect();
    let targets = matched
        .iter()
        .zip(&priors.boxes)
        .map(|(m, prior)| m.map_or([0.0; 4], |g| encode(&gt.boxes[g], prior, v)))
        .collect();
    MatchResult {
        matched,
        labels,
        targets,
    }
}
