//! Prior-box layout of the 300 and 512 presets.
//!
//! ```text
//! cargo run --release --example priors
//! ```

use fssd::boxes::to_corner;
use fssd::model::{Detector, ModelConfig};
use fssd::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fssd::error::Result<()> {
    for size in [300, 512] {
        let model = ModelConfig::preset(size)?;
        let specs = model.prior_specs()?;
        let total: usize = specs.iter().map(|s| s.count()).sum();
        println!("input {size}: {total} priors over {} levels", specs.len());
        for (k, s) in specs.iter().enumerate() {
            println!(
                "  level {k}: {0}x{0} cells, {1} boxes per cell, scale {2:.3}, ratios {3:?}",
                s.feature_size,
                s.priors_per_location(),
                s.scale,
                s.extra_ratios
            );
        }
    }

    // The boxes themselves: the anchors of the top-left cell of level 0.
    let mut store = ParamStore::new();
    let det = Detector::build(ModelConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let priors = det.priors();
    let per_cell = priors.priors_per_location()[0];
    println!("\nfirst cell of level 0 (centre form, then corners):");
    for b in &priors.boxes[..per_cell] {
        let c = to_corner(b);
        println!(
            "  cx {:.4} cy {:.4} w {:.4} h {:.4}   [{:.4}, {:.4}, {:.4}, {:.4}]",
            b[0], b[1], b[2], b[3], c[0], c[1], c[2], c[3]
        );
    }
    Ok(())
}
