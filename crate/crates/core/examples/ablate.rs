//! Runs an ablation grid at smoke scale and prints the table.
//!
//! ```text
//! cargo run --release --example ablate -- [axes] [config.json]
//! ```
//!
//! `axes` is `table1`, `table2` (the default) or a grid such as
//! `fusion_op=concat,ele-sum;normalize_after_fusion=true,false;baseline`.

use std::path::PathBuf;

use fssd::harness::ablate::Progress;
use fssd::harness::{run_ablation, AxesSpec, RunConfig};

fn main() -> fssd::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let axes: AxesSpec = args.next().unwrap_or_else(|| "table2".into()).parse()?;
    let config = PathBuf::from(
        args.next()
            .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json").into()),
    );
    let run = RunConfig::load(&config)?;
    let train = run.dataset("train")?;
    let test = run.dataset("test")?;
    let report = run_ablation(&run, &axes, &train, &test, |p| {
        if let Progress::Done { label, seed, report } = p {
            eprintln!("{label} (seed {seed}): mAP {:.4}", report.map);
        }
    })?;
    println!("{}", report.table);
    Ok(())
}
