//! Rebuilding a detector from a checkpoint and running it on single images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::shapeworld::{images_to_tensor, RgbImage, CLASS_NAMES};
use super::train::{config_hash, PrecisionGuard};
use crate::boxes::CornerBox;
use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::params::ParamStore;
use crate::postprocess::{Detection, PostprocessConfig};
use crate::tensor::GemmPrecision;

/// Detector and parameters restored from `ck`, which must carry its model
/// configuration and every parameter.
pub fn load_detector(ck: &Checkpoint) -> Result<(Detector, ParamStore)> {
    let json = ck
        .model_config
        .as_deref()
        .ok_or_else(|| Error::Config("checkpoint has no embedded model configuration".into()))?;
    let model: ModelConfig = serde_json::from_str(json)?;
    let hash = config_hash(&model);
    let mut store = ParamStore::new();
    let detector = Detector::build(model, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let report = ck.apply(&mut store, hash, |_| true, false);
    if let Some(n) = report.missing.first().or(report.shape_mismatch.first()) {
        return Err(Error::Config(format!("checkpoint does not provide parameter `{n}`")));
    }
    Ok((detector, store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub category: usize,
    pub name: String,
    pub score: f64,
    /// Normalised corners.
    #[serde(rename = "box")]
    pub bbox: CornerBox,
    /// Corners in pixels of the original image.
    pub box_px: CornerBox,
}

/// Detections on one image of any size; it is resized to the model input.
pub fn detect_image(
    detector: &Detector,
    store: &mut ParamStore,
    image: &RgbImage,
    cfg: &PostprocessConfig,
) -> Result<Vec<ImageDetection>> {
    let _guard = PrecisionGuard::set(GemmPrecision::F32);
    let size = detector.config().input_size() as u32;
    let resized;
    let input = if image.width == size && image.height == size {
        image
    } else {
        resized = image.resize_nearest(size);
        &resized
    };
    let x = images_to_tensor(&[input])?;
    let dets = detector.detect(store, &x, cfg)?.pop().unwrap_or_default();
    let (w, h) = (image.width as f64, image.height as f64);
    Ok(dets
        .into_iter()
        .map(|Detection { category, score, bbox }| ImageDetection {
            category,
            name: CLASS_NAMES.get(category - 1).map_or_else(|| format!("class{category}"), |s| s.to_string()),
            score,
            bbox,
            box_px: [bbox[0] * w, bbox[1] * h, bbox[2] * w, bbox[3] * h],
        })
        .collect())
}
