mod common;

use common::smoke_run;
use fssd::boxes::flip_horizontal;
use fssd::error::Error;
use fssd::harness::gradcheck::tiny_model_config;
use fssd::harness::train::smoothed_loss;
use fssd::harness::{evaluate, generate_dataset, Checkpoint, Dataset, RunConfig, ShapeWorldSpec, TrainConfig, Trainer};
use fssd::model::Detector;
use fssd::params::{ParamKind, ParamStore};
use fssd::tensor::GemmPrecision;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trainables(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(n, p)| (n.to_string(), p.value.data().to_vec()))
        .collect()
}

fn tiny_data() -> Dataset {
    generate_dataset(&ShapeWorldSpec {
        image_size: 64,
        num_images: 6,
        small_side: [6, 12],
        large_side: [16, 40],
        ..ShapeWorldSpec::default()
    })
    .unwrap()
}

fn tiny_model() -> fssd::model::ModelConfig {
    fssd::model::ModelConfig {
        num_classes: 3,
        ..tiny_model_config()
    }
}

fn exact(lr: f64, multiplier: f64) -> TrainConfig {
    TrainConfig {
        lr,
        momentum: 0.0,
        weight_decay: 0.0,
        warmup_iterations: 0,
        fusion_lr_multiplier: multiplier,
        batch_size: 2,
        precision: GemmPrecision::F64,
        snapshot_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn fusion_multiplier_scales_only_fusion_updates() {
    let data = tiny_data();
    let mut deltas = Vec::new();
    for m in [1.0, 3.0] {
        let mut t = Trainer::new(tiny_model(), exact(1e-2, m), &data).unwrap();
        let before = trainables(&t.store);
        t.step_once().unwrap();
        let after = trainables(&t.store);
        deltas.push(
            before
                .into_iter()
                .zip(after)
                .map(|((n, a), (_, b))| (n, a.iter().zip(&b).map(|(x, y)| y - x).collect::<Vec<_>>()))
                .collect::<Vec<_>>(),
        );
    }
    let mut fusion_seen = false;
    for ((name, d1), (_, d3)) in deltas[0].iter().zip(&deltas[1]) {
        if name.starts_with("fusion.") {
            fusion_seen = true;
            for (a, b) in d1.iter().zip(d3) {
                assert!((b - 3.0 * a).abs() <= 1e-12 * (1.0 + a.abs()), "{name}: {a} vs {b}");
            }
        } else {
            assert_eq!(d1, d3, "{name}");
        }
    }
    assert!(fusion_seen);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = tiny_data();
    let mut t = Trainer::new(
        tiny_model(),
        TrainConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            ..exact(0.0, 2.0)
        },
        &data,
    )
    .unwrap();
    let before = trainables(&t.store);
    for _ in 0..3 {
        t.step_once().unwrap();
    }
    assert_eq!(trainables(&t.store), before);
}

#[test]
fn resumed_run_is_bitwise_identical() {
    let run = smoke_run();
    let data = run.dataset("train").unwrap();
    let tc = TrainConfig {
        iterations: 20,
        snapshot_every: 5,
        ..run.train.clone()
    };
    let mut full = Trainer::new(run.model.clone(), tc.clone(), &data).unwrap();
    full.run(|_, _| {}).unwrap();

    let mut half = Trainer::new(run.model.clone(), TrainConfig { iterations: 10, ..tc.clone() }, &data).unwrap();
    half.run(|_, _| {}).unwrap();
    let saved = Checkpoint::from_bytes(&half.checkpoint().to_bytes()).unwrap();
    let mut rest =
        Trainer::with_init(run.model.clone(), TrainConfig { resume: true, ..tc }, &data, Some(&saved)).unwrap();
    assert_eq!(rest.step, 10);
    rest.run(|_, _| {}).unwrap();

    assert_eq!(rest.log, full.log[10..]);
    assert_eq!(rest.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn resume_refuses_a_different_model() {
    let run = smoke_run();
    let data = run.dataset("train").unwrap();
    let t = Trainer::new(run.model.clone(), TrainConfig { iterations: 0, ..run.train.clone() }, &data).unwrap();
    let mut other = run.model.clone();
    other.num_classes = 4;
    let r = Trainer::with_init(other, TrainConfig { resume: true, ..run.train.clone() }, &data, Some(&t.checkpoint()));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn flipping_mirrors_pixels_and_boxes() {
    let data = generate_dataset(&ShapeWorldSpec {
        num_images: 5,
        ..ShapeWorldSpec::default()
    })
    .unwrap();
    for s in &data.samples {
        let f = s.flip_horizontal();
        assert_eq!(f.flip_horizontal(), *s);
        let w = s.image.width;
        for (x, y) in [(0, 0), (17, 40), (w - 1, 299), (150, 150)] {
            assert_eq!(f.image.get(x, y), s.image.get(w - 1 - x, y));
        }
        let (a, b) = (s.ground_truth(), f.ground_truth());
        for (ga, gb) in a.boxes.iter().zip(&b.boxes) {
            let m = flip_horizontal(ga);
            for k in 0..4 {
                assert!((m[k] - gb[k]).abs() < 1e-12);
            }
        }
        assert_eq!(a.labels, b.labels);
    }
}

#[test]
fn backbone_only_warm_start_loads_exactly_the_backbone() {
    let run = smoke_run();
    let data = run.dataset("train").unwrap();
    let mut src = Trainer::new(run.model.clone(), TrainConfig { iterations: 5, ..run.train.clone() }, &data).unwrap();
    src.run(|_, _| {}).unwrap();
    let ck = src.checkpoint();

    let mut target = run.model.clone();
    target.fusion = None;
    let tc = TrainConfig {
        iterations: 0,
        seed: 9,
        init_prefixes: vec!["backbone.".into()],
        ..run.train.clone()
    };
    let warm = Trainer::with_init(target.clone(), tc.clone(), &data, Some(&ck)).unwrap();
    let mut fresh_store = ParamStore::new();
    Detector::build(target, &mut fresh_store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

    let report = warm.init_report.as_ref().unwrap();
    assert!(report.hash_mismatch);
    assert!(report.missing.is_empty());
    assert!(!report.loaded.is_empty());
    for (name, p) in warm.store.iter() {
        if name.starts_with("backbone.") {
            assert!(report.loaded.iter().any(|n| n == name));
            let want = ck.tensor(name).unwrap();
            assert_eq!(p.value.data(), want.data(), "{name}");
        } else {
            assert_eq!(p.value.data(), fresh_store.get(name).unwrap().value.data(), "{name}");
        }
    }
}

#[test]
fn loss_falls_over_200_iterations_for_three_seeds() {
    let mut run = smoke_run();
    run.data.train.num_images = 64;
    let data = run.dataset("train").unwrap();
    for seed in 0..3 {
        let tc = TrainConfig {
            seed,
            iterations: 200,
            lr_steps: vec![150],
            ..run.train.clone()
        };
        let mut t = Trainer::new(run.model.clone(), tc, &data).unwrap();
        t.run(|_, _| {}).unwrap();
        let early = smoothed_loss(&t.log, 20, 20).unwrap();
        let late = smoothed_loss(&t.log, 200, 20).unwrap();
        assert!(late < 0.6 * early, "seed {seed}: {early} -> {late}");
    }
}

fn train_and_eval(run: &RunConfig) -> (Vec<u8>, String) {
    let data = run.dataset("train").unwrap();
    let test = run.dataset("test").unwrap();
    let mut t = Trainer::new(run.model.clone(), run.train.clone(), &data).unwrap();
    t.run(|_, _| {}).unwrap();
    let ck = t.checkpoint().to_bytes();
    let report = evaluate(&t.detector, &mut t.store, &test, &run.eval).unwrap().to_json();
    (ck, report)
}

#[test]
fn identical_seed_and_config_give_identical_bytes() {
    let run = smoke_run();
    let a = train_and_eval(&run);
    let b = train_and_eval(&run);
    assert_eq!(a, b);
    let mut other = run.clone();
    other.train.seed = 1;
    assert_ne!(train_and_eval(&other).0, a.0);
}

#[test]
fn empty_splits_are_errors() {
    let run = smoke_run();
    let empty = Dataset { samples: Vec::new() };
    assert!(matches!(
        Trainer::new(run.model.clone(), run.train.clone(), &empty),
        Err(Error::EmptyDataset)
    ));
    let data = run.dataset("train").unwrap();
    let mut t = Trainer::new(run.model.clone(), TrainConfig { iterations: 0, ..run.train.clone() }, &data).unwrap();
    assert!(matches!(
        evaluate(&t.detector, &mut t.store, &empty, &run.eval),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn divergence_is_reported_with_its_iteration() {
    let run = smoke_run();
    let data = run.dataset("train").unwrap();
    let tc = TrainConfig {
        lr: 1e12,
        warmup_iterations: 0,
        iterations: 50,
        ..run.train.clone()
    };
    let mut t = Trainer::new(run.model.clone(), tc, &data).unwrap();
    match t.run(|_, _| {}) {
        Err(Error::Diverged { iteration, parameter }) => {
            assert!((1..=50).contains(&iteration));
            assert!(!parameter.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn labels_beyond_the_head_are_rejected() {
    let data = tiny_data();
    assert!(matches!(
        Trainer::new(tiny_model_config(), exact(1e-2, 1.0), &data),
        Err(Error::Config(_))
    ));
}

#[test]
fn wrong_image_size_is_rejected() {
    let run = smoke_run();
    let big = generate_dataset(&ShapeWorldSpec {
        num_images: 1,
        ..ShapeWorldSpec::default()
    })
    .unwrap();
    assert!(matches!(
        Trainer::new(run.model.clone(), run.train.clone(), &big),
        Err(Error::Config(_))
    ));
}
