//! Shapes flowing through the backbone taps, the fusion module and the
//! three pyramid variants, next to the plain no-fusion pyramid.
//!
//! ```text
//! cargo run --release --example feature_maps
//! ```

use fssd::fusion::{Neck, PyramidVariant};
use fssd::harness::shapeworld::images_to_tensor;
use fssd::harness::{generate_dataset, ShapeWorldSpec};
use fssd::model::{Detector, ModelConfig};
use fssd::params::ParamStore;
use fssd::tensor::graph::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fssd::error::Result<()> {
    let data = generate_dataset(&ShapeWorldSpec {
        num_images: 1,
        ..ShapeWorldSpec::default()
    })?;
    let image = images_to_tensor(&[&data.samples[0].image])?;

    let base = ModelConfig::default();
    let mut variants: Vec<(String, ModelConfig)> = Vec::new();
    for v in [PyramidVariant::A, PyramidVariant::B, PyramidVariant::C] {
        let mut m = base.clone();
        m.fusion.as_mut().expect("default fuses").pyramid_variant = v;
        variants.push((format!("fusion, variant {v:?}"), m));
    }
    variants.push((
        "plain pyramid".into(),
        ModelConfig {
            fusion: None,
            ..base.clone()
        },
    ));

    for (label, model) in variants {
        let mut store = ParamStore::new();
        let det = Detector::build(model, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = det.forward(&mut g, &mut store, x, false)?;
        println!("{label}: {} trainable parameters", store.trainable_count(""));
        if let Neck::Fusion(f) = det.neck() {
            println!("  sources {:?} -> {:?}", f.config().source_layers, f.transform_modes());
        }
        for (k, (loc, conf)) in out.loc.iter().zip(&out.conf).enumerate() {
            println!(
                "  level {k}: {:>2}x{:<2} {:>3} channels  loc {:?}  conf {:?}",
                det.neck().level_sizes()[k],
                det.neck().level_sizes()[k],
                det.neck().level_channels()[k],
                g.value(*loc).shape(),
                g.value(*conf).shape()
            );
        }
    }
    Ok(())
}
