//! Matches the priors of the default detector against one ShapeWorld image
//! and shows how the targets round-trip through the box coder.
//!
//! ```text
//! cargo run --release --example matching -- [image_index]
//! ```

use fssd::boxes::{decode, iou, to_corner};
use fssd::harness::shapeworld::{generate_sample, CLASS_NAMES};
use fssd::harness::ShapeWorldSpec;
use fssd::model::{Detector, ModelConfig};
use fssd::multibox::match_priors;
use fssd::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fssd::error::Result<()> {
    let index = std::env::args().nth(1).map_or(0, |s| s.parse().expect("image index"));
    let sample = generate_sample(&ShapeWorldSpec::default(), index);
    let gt = sample.ground_truth();

    let model = ModelConfig::default();
    let mut store = ParamStore::new();
    let det = Detector::build(model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let priors = det.priors();
    let m = match_priors(&gt, priors, 0.5, &model.priors.variances);
    println!("{} objects, {} of {} priors positive", gt.len(), m.num_positive(), priors.len());

    for (g, (b, &label)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
        let mine: Vec<usize> = (0..priors.len()).filter(|&p| m.matched[p] == Some(g)).collect();
        let best = mine
            .iter()
            .map(|&p| (p, iou(b, &to_corner(&priors.boxes[p]))))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let levels: Vec<usize> = mine.iter().map(|&p| priors.level[p]).collect();
        print!(
            "  #{g} {:<8} side {:>3.0}px: {:>3} priors on levels {:?}",
            CLASS_NAMES[label - 1],
            (b[2] - b[0]).max(b[3] - b[1]) * 300.0,
            mine.len(),
            {
                let mut l = levels.clone();
                l.dedup();
                l
            }
        );
        if let Some((p, overlap)) = best {
            let back = decode(&m.targets[p], &priors.boxes[p], &model.priors.variances);
            let err = b.iter().zip(back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            println!(", best IoU {overlap:.3}, decode error {err:.1e}");
        } else {
            println!();
        }
    }
    Ok(())
}
