//! Finite-difference checks of every kernel, the loss, the fusion module and
//! a tiny end-to-end detector.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed]
//! ```

use fssd::harness::gradcheck::run_suite;

fn main() -> fssd::error::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let reports = run_suite(seed, None)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
