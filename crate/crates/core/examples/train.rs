//! Trains a detector from a run configuration and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train -- [config.json] [out.ckpt] [iterations]
//! ```
//!
//! The default configuration is the 64-pixel smoke setup, which finishes in
//! seconds; `configs/toy.json` is the 300-pixel setup used for real runs.

use std::path::PathBuf;
use std::time::Instant;

use fssd::harness::train::smoothed_loss;
use fssd::harness::{RunConfig, Trainer};

fn main() -> fssd::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(
        args.next()
            .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json").into()),
    );
    let out = PathBuf::from(args.next().unwrap_or_else(|| "model.ckpt".into()));
    let mut run = RunConfig::load(&config)?;
    if let Some(n) = args.next() {
        run.train.iterations = n.parse().expect("iterations");
    }
    let data = run.dataset("train")?;
    let mut t = Trainer::new(run.model.clone(), run.train.clone(), &data)?;
    println!(
        "{} parameters ({} in the fusion module), {} training images",
        t.store.trainable_count(""),
        t.store.trainable_count("fusion."),
        data.len()
    );
    let start = Instant::now();
    let every = (run.train.iterations / 10).max(1);
    t.run(|t, e| {
        if e.iteration % every == 0 {
            println!(
                "iter {:>5}  lr {:.1e}  loss {:.3} (avg {:.3})  positives {}",
                e.iteration,
                e.lr,
                e.loss,
                smoothed_loss(&t.log, e.iteration, every).unwrap_or(e.loss),
                e.num_pos
            );
        }
    })?;
    println!("{:.1}s", start.elapsed().as_secs_f64());
    t.checkpoint().save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}
