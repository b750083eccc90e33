//! Runs a checkpoint on a PNG and prints the detections as JSON.
//!
//! ```text
//! cargo run --release --example train
//! cargo run --release --example detect -- [model.ckpt] [image.png] [conf_threshold]
//! ```
//!
//! Without an image argument a fresh ShapeWorld image matching the model's
//! input size is drawn and saved as `detect_input.png`.

use std::path::PathBuf;

use fssd::harness::shapeworld::generate_sample;
use fssd::harness::{detect_image, load_detector, Checkpoint, RgbImage, ShapeWorldSpec};
use fssd::postprocess::PostprocessConfig;

fn main() -> fssd::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "model.ckpt".into()));
    let (detector, mut store) = load_detector(&Checkpoint::load(&ckpt)?)?;
    let image = match args.next() {
        Some(p) => RgbImage::load(p.as_ref())?,
        None => {
            let size = detector.config().input_size() as u32;
            let spec = ShapeWorldSpec {
                seed: 99,
                image_size: size,
                small_side: [size / 16, size / 8],
                large_side: [size / 4, size / 2],
                ..ShapeWorldSpec::default()
            };
            let s = generate_sample(&spec, 0);
            println!("ground truth: {}", serde_json::to_string(&s.annotation())?);
            std::fs::write("detect_input.png", s.image.encode_png()?).expect("write detect_input.png");
            s.image
        }
    };
    let cfg = PostprocessConfig {
        conf_threshold: args.next().map_or(0.3, |s| s.parse().expect("threshold")),
        ..PostprocessConfig::default()
    };
    let dets = detect_image(&detector, &mut store, &image, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&dets)?);
    Ok(())
}
