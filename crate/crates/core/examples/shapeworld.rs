//! Generates a ShapeWorld split, prints its statistics and writes it to disk.
//!
//! ```text
//! cargo run --release --example shapeworld -- [out_dir] [num_images]
//! ```

use std::path::PathBuf;

use fssd::harness::shapeworld::{write_dataset, CLASS_NAMES};
use fssd::harness::{generate_dataset, ShapeWorldSpec};

fn main() -> fssd::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "shapeworld_out".into()));
    let spec = ShapeWorldSpec {
        num_images: args.next().map_or(20, |n| n.parse().expect("num_images")),
        ..ShapeWorldSpec::default()
    };
    let data = generate_dataset(&spec)?;

    let mut per_class = [0usize; 3];
    let (mut small, mut large) = (0, 0);
    for s in &data.samples {
        for (b, &l) in s.boxes.iter().zip(&s.labels) {
            per_class[l - 1] += 1;
            if (b[2] - b[0]).max(b[3] - b[1]) < 32 {
                small += 1;
            } else {
                large += 1;
            }
        }
    }
    println!("{} images of {}x{}", data.len(), spec.image_size, spec.image_size);
    for (name, n) in CLASS_NAMES.iter().zip(per_class) {
        println!("  {name:<9} {n}");
    }
    println!("  small {small}, large {large}, dropped after retries {}", data.dropped_objects());

    let first = &data.samples[0];
    println!("image 0 annotation: {}", serde_json::to_string(&first.annotation())?);

    write_dataset(&data, &spec, &out)?;
    println!("written to {}", out.display());
    Ok(())
}
