//! Checkpoint round trip, backbone-only warm start and exact resume.
//!
//! ```text
//! cargo run --release --example checkpoint
//! ```

use fssd::harness::{Checkpoint, RunConfig, TrainConfig, Trainer};

fn main() -> fssd::error::Result<()> {
    let run = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json").as_ref())?;
    let data = run.dataset("train")?;
    let dir = std::env::temp_dir().join(format!("fssd-checkpoint-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");

    // Reference: 20 uninterrupted iterations.
    let mut tc = run.train.clone();
    tc.iterations = 20;
    tc.snapshot_every = 10;
    let mut full = Trainer::new(run.model.clone(), tc.clone(), &data)?;
    full.run(|_, _| {})?;

    // Same run, stopped after 10 iterations, saved, and resumed.
    let mut first = Trainer::new(run.model.clone(), TrainConfig { iterations: 10, ..tc.clone() }, &data)?;
    first.run(|_, _| {})?;
    let path = dir.join("half.ckpt");
    first.checkpoint().save(&path)?;
    let bytes = std::fs::metadata(&path).expect("saved").len();
    println!("saved step {} ({bytes} bytes, {} tensors)", first.step, Checkpoint::load(&path)?.tensors.len());

    let mut resumed = Trainer::new(
        run.model.clone(),
        TrainConfig {
            init_checkpoint: Some(path.clone()),
            resume: true,
            ..tc.clone()
        },
        &data,
    )?;
    resumed.run(|_, _| {})?;
    let same = full.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    println!("resumed from step 10 to {}: identical to the uninterrupted run: {same}", resumed.step);

    // Backbone-only warm start of a model with a different neck.
    let mut other = run.model.clone();
    other.fusion = None;
    let warm = Trainer::new(
        other,
        TrainConfig {
            init_checkpoint: Some(path),
            init_prefixes: vec!["backbone.".into()],
            iterations: 0,
            ..tc
        },
        &data,
    )?;
    let r = warm.init_report.as_ref().expect("init checkpoint given");
    println!(
        "backbone warm start into a no-fusion model: {} backbone tensors loaded, {} checkpoint tensors skipped, config hash differs: {}",
        r.loaded.len(),
        r.unused.len(),
        r.hash_mismatch
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
