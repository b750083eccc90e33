//! Inference over a dataset split and the mAP report.

use serde::{Deserialize, Serialize};

use super::shapeworld::{images_to_tensor, Dataset, CLASS_NAMES};
use super::train::PrecisionGuard;
use crate::boxes::CornerBox;
use crate::error::{Error, Result};
use crate::eval::{mean_ap, voc_ap, EvalRecord, Interpolation, Subset};
use crate::model::Detector;
use crate::params::ParamStore;
use crate::postprocess::PostprocessConfig;
use crate::tensor::GemmPrecision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub postprocess: PostprocessConfig,
    pub batch_size: usize,
    /// Objects whose longer side is below this many pixels count as small.
    pub small_side_px: f64,
    pub precision: GemmPrecision,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            postprocess: PostprocessConfig::default(),
            batch_size: 8,
            small_side_px: 32.0,
            precision: GemmPrecision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: String,
    /// `None` when the class has no ground truth in the split.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub num_objects: usize,
    pub per_class: Vec<ClassAp>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub num_objects: usize,
    pub num_detections: usize,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub small: Breakdown,
    pub large: Breakdown,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c - 1).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

/// Runs the detector over every image of `dataset`.
pub fn collect_records(
    detector: &Detector,
    store: &mut ParamStore,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let _guard = PrecisionGuard::set(cfg.precision);
    let mut records = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(cfg.batch_size.max(1)) {
        let images = images_to_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let dets = detector.detect(store, &images, &cfg.postprocess)?;
        for (s, d) in chunk.iter().zip(dets) {
            records.push(EvalRecord {
                detections: d,
                ground_truth: s.ground_truth(),
            });
        }
    }
    Ok(records)
}

/// Per-class AP, mAP and the small/large breakdown of `records`.
pub fn report(records: &[EvalRecord], num_classes: usize, image_size: f64, cfg: &EvalConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_class = |subset: Option<&Subset>| -> Vec<ClassAp> {
        (1..=num_classes)
            .map(|c| ClassAp {
                class: c,
                name: class_name(c),
                ap: voc_ap(records, c, cfg.iou_threshold, cfg.interpolation, subset),
            })
            .collect()
    };
    let side = |b: &CornerBox| (b[2] - b[0]).max(b[3] - b[1]) * image_size;
    let small = |b: &CornerBox| side(b) < cfg.small_side_px;
    let large = |b: &CornerBox| !small(b);
    let count = |f: &dyn Fn(&CornerBox) -> bool| {
        records.iter().flat_map(|r| &r.ground_truth.boxes).filter(|b| f(b)).count()
    };
    let breakdown = |f: &dyn Fn(&CornerBox) -> bool| {
        let s = Subset {
            keep_gt: f,
            keep_detection: f,
        };
        let per_class = per_class(Some(&s));
        let aps: Vec<_> = per_class.iter().map(|c| c.ap).collect();
        Breakdown {
            num_objects: count(f),
            map: mean_ap(&aps).ok(),
            per_class,
        }
    };
    let all = per_class(None);
    let map = mean_ap(&all.iter().map(|c| c.ap).collect::<Vec<_>>())?;
    Ok(EvalReport {
        num_images: records.len(),
        num_objects: count(&|_| true),
        num_detections: records.iter().map(|r| r.detections.len()).sum(),
        iou_threshold: cfg.iou_threshold,
        interpolation: cfg.interpolation,
        per_class: all,
        map,
        small: breakdown(&small),
        large: breakdown(&large),
    })
}

pub fn evaluate(detector: &Detector, store: &mut ParamStore, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let records = collect_records(detector, store, dataset, cfg)?;
    report(&records, detector.config().num_classes, detector.config().input_size() as f64, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multibox::GroundTruth;
    use crate::postprocess::Detection;

    #[test]
    fn breakdown_splits_by_pixel_side() {
        let small_box = [0.0, 0.0, 0.1, 0.1];
        let large_box = [0.5, 0.5, 0.9, 0.9];
        let rec = EvalRecord {
            ground_truth: GroundTruth::new(vec![small_box, large_box], vec![1, 2]).unwrap(),
            detections: vec![Detection {
                category: 2,
                score: 0.9,
                bbox: large_box,
            }],
        };
        let r = report(&[rec], 3, 300.0, &EvalConfig::default()).unwrap();
        assert_eq!(r.per_class[0].ap, Some(0.0));
        assert_eq!(r.per_class[1].ap, Some(1.0));
        assert_eq!(r.per_class[2].ap, None);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.small.num_objects, 1);
        assert_eq!(r.small.map, Some(0.0));
        assert_eq!(r.large.map, Some(1.0));
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(matches!(report(&[], 3, 300.0, &EvalConfig::default()), Err(Error::EmptyDataset)));
    }
}
