use fssd::backbone::{Backbone, BackboneConfig};
use fssd::fusion::{pyramid_sizes, FusionConfig, FusionModule, FusionOp, PyramidVariant};
use fssd::model::{Detector, ModelConfig};
use fssd::params::ParamStore;
use fssd::tensor::graph::Graph;
use fssd::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn halvings(s: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut x = s as f64;
    for _ in 0..n {
        x = (x / 2.0).ceil();
        out.push(x as usize);
    }
    out
}

fn narrow_backbone(size: usize) -> BackboneConfig {
    BackboneConfig {
        stage_channels: vec![1, 1, 1, 1, 1],
        convs_per_stage: vec![1, 1, 1, 1, 1],
        ..BackboneConfig::preset(size)
    }
}

#[test]
fn stage_sizes_follow_ceil_halving_from_64_to_600() {
    for s in 64..=600 {
        let cfg = BackboneConfig::preset(s);
        assert_eq!(cfg.stage_sizes(), halvings(s, 5), "input {s}");
        let base = cfg.tap_size("conv4_3").unwrap();
        let sizes = pyramid_sizes(base, 6);
        for w in sizes.windows(2) {
            let expect = if w[0] == 3 { 1 } else { w[0].div_ceil(2) };
            assert_eq!(w[1], expect);
        }
    }
}

#[test]
fn actual_tap_shapes_match_the_oracle() {
    for s in [64, 65, 99, 128, 150, 300, 301, 512, 600] {
        let mut store = ParamStore::new();
        let bb = Backbone::build(narrow_backbone(s), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let feats = bb.features(&store, Tensor::zeros([1, 3, s, s])).unwrap();
        let want = halvings(s, 5);
        for (name, t) in feats {
            let stage = bb.config().tap(&name).unwrap().stage;
            assert_eq!(t.height(), want[stage], "{name} at {s}");
            assert_eq!(t.width(), want[stage]);
        }
    }
}

#[test]
fn presets_give_the_reference_pyramids() {
    assert_eq!(ModelConfig::preset(300).unwrap().level_sizes().unwrap(), vec![38, 19, 10, 5, 3, 1]);
    assert_eq!(ModelConfig::preset(512).unwrap().level_sizes().unwrap(), vec![64, 32, 16, 8, 4, 2, 1]);
}

fn fusion_setup(cfg: FusionConfig, seed: u64) -> (Backbone, FusionModule, ParamStore) {
    let backbone = BackboneConfig {
        input_size: 64,
        stage_channels: vec![3, 4, 5, 6, 6],
        convs_per_stage: vec![1, 1, 1, 1, 1],
        ..BackboneConfig::preset(64)
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::build(backbone.clone(), &mut store, &mut rng).unwrap();
    let fm = FusionModule::build(cfg, &backbone, &mut store, &mut rng).unwrap();
    (bb, fm, store)
}

fn small_fusion(widths: Vec<usize>, op: FusionOp, bn: bool, variant: PyramidVariant) -> FusionConfig {
    FusionConfig {
        projection_channels: widths,
        fusion_op: op,
        normalize_after_fusion: bn,
        pyramid_variant: variant,
        pyramid_channels: vec![6, 6, 4, 4],
        ..FusionConfig::default()
    }
}

#[test]
fn batch_norm_standardises_the_fused_map_in_training() {
    let (bb, fm, mut store) = fusion_setup(small_fusion(vec![3, 4, 2], FusionOp::Concat, true, PyramidVariant::B), 1);
    let x = Tensor::uniform([4, 3, 64, 64], -0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = Graph::new();
    let xi = g.constant(x);
    let maps = bb.forward(&mut g, &store, xi).unwrap();
    let (fused, _) = fm.forward(&mut g, &mut store, &maps, true).unwrap();
    let y = g.value(fused.node);
    assert_eq!(y.channels(), 9);
    let n = (y.batch() * y.height() * y.width()) as f64;
    for c in 0..y.channels() {
        let vals: Vec<f64> = (0..y.batch()).flat_map(|b| y.plane(b, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
        // Exactly 1 up to the ε in the denominator, unless the channel is flat.
        let raw: Vec<f64> = {
            let t = g.value(fused.transformed[if c < 3 { 0 } else if c < 7 { 1 } else { 2 }]);
            let cc = if c < 3 { c } else if c < 7 { c - 3 } else { c - 7 };
            (0..t.batch()).flat_map(|b| t.plane(b, cc).to_vec()).collect()
        };
        let rm = raw.iter().sum::<f64>() / n;
        let rv = raw.iter().map(|v| (v - rm) * (v - rm)).sum::<f64>() / n;
        assert!((var - rv / (rv + 1e-5)).abs() < 1e-9, "channel {c} var {var} raw {rv}");
    }
}

#[test]
fn variants_differ_only_where_expected() {
    for (variant, ch0) in [(PyramidVariant::A, 9), (PyramidVariant::B, 6), (PyramidVariant::C, 6)] {
        let (bb, fm, mut store) = fusion_setup(small_fusion(vec![3, 4, 2], FusionOp::Concat, false, variant), 3);
        let mut g = Graph::new();
        let xi = g.constant(Tensor::zeros([1, 3, 64, 64]));
        let maps = bb.forward(&mut g, &store, xi).unwrap();
        let (fused, pyr) = fm.forward(&mut g, &mut store, &maps, false).unwrap();
        assert_eq!(pyr.sizes, vec![8, 4, 2, 1]);
        assert_eq!(pyr.channels, vec![ch0, 6, 4, 4]);
        assert_eq!(pyr.levels[0] == fused.node, variant == PyramidVariant::A);
        assert_eq!(fm.level_channels(), pyr.channels);
        let reduce = store.names().filter(|n| n.contains(".reduce.")).count();
        assert_eq!(reduce > 0, variant == PyramidVariant::C);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concat_gradient_is_split_into_blocks(
        widths in prop::collection::vec(1usize..5, 1..5),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let xs: Vec<_> = widths.iter().map(|&c| g.input(Tensor::uniform([2, c, 3, 3], -1.0, 1.0, &mut rng))).collect();
        let y = g.concat_channels(&xs).unwrap();
        let total: usize = widths.iter().sum();
        let up = Tensor::uniform([2, total, 3, 3], -1.0, 1.0, &mut rng);
        let grads = g.backward(vec![(y, up.clone())]).unwrap();
        let mut off = 0;
        for (&x, &c) in xs.iter().zip(&widths) {
            let gx = grads.get(x).unwrap();
            for b in 0..2 {
                for k in 0..c {
                    prop_assert_eq!(gx.plane(b, k), up.plane(b, off + k));
                }
            }
            off += c;
        }
    }

    #[test]
    fn element_sum_passes_the_gradient_to_every_input(n in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let xs: Vec<_> = (0..n).map(|_| g.input(Tensor::uniform([1, 3, 2, 2], -1.0, 1.0, &mut rng))).collect();
        let y = g.add(&xs).unwrap();
        let up = Tensor::uniform([1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let grads = g.backward(vec![(y, up.clone())]).unwrap();
        for &x in &xs {
            prop_assert_eq!(grads.get(x).unwrap().data(), up.data());
        }
    }

    #[test]
    fn prior_count_matches_built_detector(first in 0.05..0.15f64, min in 0.16..0.3f64) {
        let mut cfg = fssd::harness::gradcheck::tiny_model_config();
        cfg.priors.first_scale = first;
        cfg.priors.min_scale = min;
        let mut store = ParamStore::new();
        let d = Detector::build(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n: usize = cfg.prior_specs().unwrap().iter().map(|s| s.count()).sum();
        prop_assert_eq!(n, d.priors().len());
        prop_assert_eq!(d.head().num_priors(), n);
    }
}
