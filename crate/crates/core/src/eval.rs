//! VOC-style average precision.

use serde::{Deserialize, Serialize};

use crate::boxes::CornerBox;
pub use crate::boxes::iou;
use crate::error::{Error, Result};
use crate::multibox::GroundTruth;
use crate::postprocess::{rank_by_score, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Detections and annotations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub detections: Vec<Detection>,
    pub ground_truth: GroundTruth,
}

/// AP from a ranked true/false-positive sequence.
pub fn ap_from_ranked(tp: &[bool], num_gt: usize, interp: Interpolation) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / num_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    match interp {
        Interpolation::AllPoint => {
            let mut mrec = vec![0.0];
            mrec.extend(&recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (0..mrec.len() - 1)
                .filter(|&i| mrec[i + 1] != mrec[i])
                .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
                .sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Which ground truths and detections count towards one AP. Ground truths
/// outside the subset are not targets; detections they absorb are dropped,
/// and unmatched detections are dropped when `keep_detection` rejects them.
pub struct Subset<'a> {
    pub keep_gt: &'a dyn Fn(&CornerBox) -> bool,
    pub keep_detection: &'a dyn Fn(&CornerBox) -> bool,
}

/// Ranked TP/FP flags for `class` and the number of target ground truths.
pub fn match_class(
    records: &[EvalRecord],
    class: usize,
    iou_threshold: f64,
    subset: Option<&Subset>,
) -> (Vec<bool>, usize) {
    let mut dets: Vec<(usize, &Detection)> = Vec::new();
    for (img, r) in records.iter().enumerate() {
        dets.extend(r.detections.iter().filter(|d| d.category == class).map(|d| (img, d)));
    }
    let gts: Vec<Vec<(CornerBox, bool)>> = records
        .iter()
        .map(|r| {
            r.ground_truth
                .boxes
                .iter()
                .zip(&r.ground_truth.labels)
                .filter(|(_, &l)| l == class)
                .map(|(b, _)| (*b, subset.is_none_or(|s| (s.keep_gt)(b))))
                .collect()
        })
        .collect();
    let num_gt = gts.iter().flatten().filter(|(_, keep)| *keep).count();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let scores: Vec<f64> = dets.iter().map(|(_, d)| d.score).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for i in rank_by_score(&scores) {
        let (img, d) = dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, (g, _)) in gts[img].iter().enumerate() {
            let o = iou(&d.bbox, g);
            if !used[img][j] && o >= iou_threshold && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        match best {
            Some((_, j)) => {
                assert!(!used[img][j], "ground truth matched twice");
                used[img][j] = true;
                if gts[img][j].1 {
                    flags.push(true);
                }
            }
            None => {
                if subset.is_none_or(|s| (s.keep_detection)(&d.bbox)) {
                    flags.push(false);
                }
            }
        }
    }
    (flags, num_gt)
}

/// AP of one class; `None` when the class has no ground truth.
pub fn voc_ap(
    records: &[EvalRecord],
    class: usize,
    iou_threshold: f64,
    interp: Interpolation,
    subset: Option<&Subset>,
) -> Option<f64> {
    let (flags, num_gt) = match_class(records, class, iou_threshold, subset);
    (num_gt > 0).then(|| ap_from_ranked(&flags, num_gt, interp))
}

/// Unweighted mean over defined APs.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMap);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn det(category: usize, score: f64, bbox: CornerBox) -> Detection {
        Detection { category, score, bbox }
    }

    #[test]
    fn hand_integrated_envelope() {
        // TP FP TP TP FP over 3 GTs: recall steps 1/3, 2/3, 1 with envelope
        // precision 1, 3/4, 3/4.
        let ap = ap_from_ranked(&[true, false, true, true, false], 3, Interpolation::AllPoint);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn fixture_through_matcher() {
        let g = [[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7], [0.1, 0.6, 0.3, 0.9]];
        let rec = EvalRecord {
            ground_truth: GroundTruth::new(g.to_vec(), vec![1, 1, 1]).unwrap(),
            detections: vec![
                det(1, 0.9, g[0]),
                det(1, 0.8, g[0]),
                det(1, 0.7, g[1]),
                det(1, 0.6, g[2]),
                det(1, 0.5, [0.8, 0.0, 0.95, 0.1]),
            ],
        };
        let ap = voc_ap(&[rec], 1, 0.5, Interpolation::AllPoint, None).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        let g = vec![[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7]];
        let gt = GroundTruth::new(g.clone(), vec![1, 2]).unwrap();
        let perfect = EvalRecord {
            detections: vec![det(1, 0.9, g[0]), det(2, 0.4, g[1])],
            ground_truth: gt.clone(),
        };
        let empty = EvalRecord {
            detections: vec![],
            ground_truth: gt,
        };
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            let aps: Vec<_> = (1..=2).map(|c| voc_ap(std::slice::from_ref(&perfect), c, 0.5, interp, None)).collect();
            assert_eq!(mean_ap(&aps).unwrap(), 1.0);
            let aps: Vec<_> = (1..=2).map(|c| voc_ap(std::slice::from_ref(&empty), c, 0.5, interp, None)).collect();
            assert_eq!(mean_ap(&aps).unwrap(), 0.0);
        }
    }

    #[test]
    fn mean_ap_rules() {
        assert_eq!(mean_ap(&[Some(0.7)]).unwrap(), 0.7);
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[Some(0.2), None, Some(0.4)]).unwrap(), 0.30000000000000004);
        assert!(matches!(mean_ap(&[None, None]), Err(Error::UndefinedMap)));
    }

    #[test]
    fn class_without_gt_is_undefined() {
        let rec = EvalRecord {
            detections: vec![det(3, 0.9, [0.1, 0.1, 0.2, 0.2])],
            ground_truth: GroundTruth::default(),
        };
        assert_eq!(voc_ap(&[rec], 3, 0.5, Interpolation::AllPoint, None), None);
    }

    #[test]
    fn subset_ignores_other_ground_truth() {
        let small = [0.0, 0.0, 0.05, 0.05];
        let large = [0.4, 0.4, 0.9, 0.9];
        let rec = EvalRecord {
            ground_truth: GroundTruth::new(vec![small, large], vec![1, 1]).unwrap(),
            detections: vec![det(1, 0.9, large), det(1, 0.5, small)],
        };
        let is_small = |b: &CornerBox| (b[2] - b[0]).max(b[3] - b[1]) < 0.1;
        let s = Subset {
            keep_gt: &is_small,
            keep_detection: &is_small,
        };
        let ap = voc_ap(&[rec], 1, 0.5, Interpolation::AllPoint, Some(&s)).unwrap();
        assert_eq!(ap, 1.0);
    }

    proptest! {
        #[test]
        fn ap_bounded_and_rank_invariant(
            scores in prop::collection::vec(0.0..1.0f64, 1..30),
            hits in prop::collection::vec(any::<bool>(), 30),
        ) {
            let g: Vec<CornerBox> = (0..scores.len()).map(|i| {
                let x = (i % 6) as f64 * 0.15;
                let y = (i / 6) as f64 * 0.15;
                [x, y, x + 0.1, y + 0.1]
            }).collect();
            let dets: Vec<Detection> = scores.iter().enumerate().map(|(i, &s)| {
                let b = if hits[i] { g[i] } else { [0.95, 0.95, 1.0, 1.0] };
                det(1, s, b)
            }).collect();
            let rec = EvalRecord { ground_truth: GroundTruth::new(g, vec![1; scores.len()]).unwrap(), detections: dets.clone() };
            let scaled = EvalRecord {
                ground_truth: rec.ground_truth.clone(),
                detections: dets.iter().map(|d| det(1, 3.0 * d.score.powi(3) + 1.0, d.bbox)).collect(),
            };
            for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
                let a = voc_ap(std::slice::from_ref(&rec), 1, 0.5, interp, None).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                let b = voc_ap(std::slice::from_ref(&scaled), 1, 0.5, interp, None).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
