//! Evaluates a checkpoint on the test split with both AP interpolations.
//!
//! ```text
//! cargo run --release --example train
//! cargo run --release --example evaluate -- [config.json] [model.ckpt]
//! ```

use std::path::PathBuf;

use fssd::eval::Interpolation;
use fssd::harness::{evaluate, load_detector, Checkpoint, RunConfig};

fn main() -> fssd::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(
        args.next()
            .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json").into()),
    );
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "model.ckpt".into()));
    let run = RunConfig::load(&config)?;
    let test = run.dataset("test")?;
    let (detector, mut store) = load_detector(&Checkpoint::load(&ckpt)?)?;

    for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
        let cfg = fssd::harness::EvalConfig {
            interpolation: interp,
            ..run.eval
        };
        let r = evaluate(&detector, &mut store, &test, &cfg)?;
        println!("{interp:?}: mAP {:.4} over {} images / {} objects", r.map, r.num_images, r.num_objects);
        for c in &r.per_class {
            println!("  {:<9} {}", c.name, c.ap.map_or("-".into(), |a| format!("{a:.4}")));
        }
        println!(
            "  small ({} objects) {}   large ({} objects) {}",
            r.small.num_objects,
            r.small.map.map_or("-".into(), |a| format!("{a:.4}")),
            r.large.num_objects,
            r.large.map.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(())
}
