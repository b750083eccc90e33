//! Softmax, per-class NMS and top-k on hand-made predictions for a small
//! prior set.
//!
//! ```text
//! cargo run --release --example postprocess
//! ```

use fssd::boxes::{encode, Variances};
use fssd::multibox::{generate_priors, PriorSpec};
use fssd::postprocess::{assemble_detections, nms, PostprocessConfig};

fn main() -> fssd::error::Result<()> {
    // Plain NMS first.
    let boxes = [
        [0.10, 0.10, 0.40, 0.40],
        [0.12, 0.11, 0.41, 0.42],
        [0.50, 0.50, 0.80, 0.90],
        [0.11, 0.09, 0.39, 0.38],
    ];
    let scores = [0.9, 0.8, 0.7, 0.95];
    println!("nms keeps {:?}", nms(&boxes, &scores, 0.45, 200));

    // Full decoding path: two objects, every prior pointing at one of them.
    let specs = vec![
        PriorSpec {
            feature_size: 4,
            scale: 0.2,
            next_scale: 0.4,
            extra_ratios: vec![2.0],
        },
        PriorSpec {
            feature_size: 2,
            scale: 0.4,
            next_scale: 0.8,
            extra_ratios: vec![2.0],
        },
    ];
    let priors = generate_priors(&specs)?;
    let v = Variances::default();
    let objects = [([0.1, 0.1, 0.35, 0.4], 1usize), ([0.5, 0.4, 0.95, 0.9], 3)];
    let classes = 4;
    let mut loc = Vec::new();
    let mut conf = Vec::new();
    for (i, p) in priors.boxes.iter().enumerate() {
        let (b, label) = objects[usize::from(p[0] > 0.45)];
        loc.extend(encode(&b, p, &v));
        for c in 0..classes {
            conf.push(if c == label { 2.0 + (i % 5) as f64 * 0.3 } else { 0.0 });
        }
    }
    let cfg = PostprocessConfig {
        conf_threshold: 0.3,
        ..PostprocessConfig::default()
    };
    let dets = assemble_detections(&loc, &conf, classes, &priors, &v, &cfg)?;
    println!("{} priors -> {} detections after NMS:", priors.len(), dets.len());
    for d in dets {
        println!(
            "  class {} score {:.3} box [{:.3}, {:.3}, {:.3}, {:.3}]",
            d.category, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
        );
    }
    Ok(())
}
