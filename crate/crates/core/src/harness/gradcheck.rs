//! Finite-difference suite over every differentiable kernel, the fusion
//! module and a whole (tiny) detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::PrecisionGuard;
use crate::backbone::{BackboneConfig, FeatureMap, FeatureMapSet, CONV3_3, CONV4_3, CONV7_2, FC_7};
use crate::boxes::{clip_unit, to_corner, Variances};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionModule, PyramidVariant};
use crate::model::{Detector, ModelConfig};
use crate::multibox::{generate_priors, match_priors, mine_batch, multibox_loss, GroundTruth, PriorConfig, PriorSpec};
use crate::multibox::Predictions;
use crate::params::ParamStore;
use crate::tensor::batchnorm::BatchNormParams;
use crate::tensor::gradcheck::{grad_check, grad_check_smooth, spread_indices, GradCheckReport, DEFAULT_STEP};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{ConvGeometry, GemmPrecision, Tensor};

pub const LINEAR_TOLERANCE: f64 = 1e-7;
pub const BATCH_NORM_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const COORDS: usize = 24;
/// Central differences are exact for piecewise-linear ops away from kinks,
/// so a wide step only shrinks round-off. Kept below the 0.005 half-spacing
/// of the pooling inputs.
const LINEAR_STEP: f64 = 1e-3;

type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<Vec<NodeId>> + 'a;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `d(Σ rᵢ·yᵢ)/d input` for every input of a recorded subgraph.
fn graph_check(
    name: &str,
    tolerance: f64,
    step: f64,
    screen_kinks: bool,
    inputs: &[(&str, Tensor)],
    build: &Build,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GradCheckReport>> {
    let record = |xs: &[Tensor]| -> Result<(Graph, Vec<NodeId>, Vec<NodeId>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let ys = build(&mut g, &ids)?;
        Ok((g, ids, ys))
    };
    let xs: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (g, ids, ys) = record(&xs)?;
    let rs: Vec<Tensor> = ys.iter().map(|&y| Tensor::uniform(g.value(y).shape(), -1.0, 1.0, rng)).collect();
    let grads = g.backward(ys.iter().copied().zip(rs.iter().cloned()).collect())?;
    let mut out = Vec::new();
    for (i, ((label, x), id)) in inputs.iter().zip(&ids).enumerate() {
        let analytic = grads.get(*id).map_or_else(|| vec![0.0; x.len()], |t| t.data().to_vec());
        let f = |p: &[f64]| {
            let mut xs = xs.clone();
            xs[i] = Tensor::from_vec(x.shape(), p.to_vec()).expect("same shape");
            let (g, _, ys) = record(&xs).expect("recorded once already");
            ys.iter().zip(&rs).map(|(&y, r)| dot(g.value(y).data(), r.data())).sum()
        };
        let name = format!("{name} ∂{label}");
        out.push(if screen_kinks {
            let idx = spread_indices(x.len(), 2 * COORDS);
            grad_check_smooth(name, f, x.data(), &analytic, &idx, COORDS, step, tolerance)
        } else {
            let idx = spread_indices(x.len(), COORDS);
            grad_check(name, f, x.data(), &analytic, Some(&idx), step, tolerance)
        });
    }
    Ok(out)
}

/// Values bounded away from 0 so ReLU kinks are out of finite-difference reach.
fn away_from_zero(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng).map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 })
}

/// Distinct values 0.01 apart in random order, so max-pool windows have no
/// near-ties.
fn distinct(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product::<usize>();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, v).expect("sized")
}

fn kernel_checks(rng: &mut ChaCha8Rng, tol: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let lin = tol.unwrap_or(LINEAR_TOLERANCE);
    let bn_tol = tol.unwrap_or(BATCH_NORM_TOLERANCE);
    let mut out = Vec::new();
    for (k, stride, padding, ceil_mode) in [(3, 1, 1, false), (3, 2, 1, false), (1, 1, 0, false), (3, 2, 0, true)] {
        let geo = ConvGeometry {
            stride,
            padding,
            ceil_mode,
        };
        let x = Tensor::uniform([2, 3, 7, 6], -1.0, 1.0, rng);
        let w = Tensor::uniform([4, 3, k, k], -1.0, 1.0, rng);
        let b = Tensor::uniform([4, 1, 1, 1], -1.0, 1.0, rng);
        out.extend(graph_check(
            &format!("conv2d k{k} s{stride} p{padding}"),
            lin,
            LINEAR_STEP,
            false,
            &[("x", x), ("w", w), ("b", b)],
            &|g, ids| Ok(vec![g.conv2d(ids[0], ids[1], ids[2], geo)?]),
            rng,
        )?);
    }
    out.extend(graph_check(
        "relu",
        lin,
        LINEAR_STEP,
            false,
        &[("x", away_from_zero([2, 3, 4, 5], rng))],
        &|g, ids| Ok(vec![g.relu(ids[0])]),
        rng,
    )?);
    for (k, s, ceil) in [(2, 2, true), (3, 2, false), (2, 1, false)] {
        out.extend(graph_check(
            &format!("max_pool2d k{k} s{s}"),
            lin,
            LINEAR_STEP,
            false,
            &[("x", distinct([2, 2, 7, 5], rng))],
            &|g, ids| Ok(vec![g.max_pool2d(ids[0], k, s, ceil)?]),
            rng,
        )?);
    }
    for (h, w, oh, ow) in [(3, 3, 7, 7), (5, 4, 8, 9), (6, 6, 4, 3), (1, 1, 3, 3)] {
        out.extend(graph_check(
            &format!("bilinear {h}x{w}->{oh}x{ow}"),
            lin,
            LINEAR_STEP,
            false,
            &[("x", Tensor::uniform([2, 2, h, w], -1.0, 1.0, rng))],
            &|g, ids| Ok(vec![g.bilinear_resize(ids[0], oh, ow)?]),
            rng,
        )?);
    }
    out.extend(graph_check(
        "concat",
        lin,
        LINEAR_STEP,
            false,
        &[
            ("a", Tensor::uniform([2, 1, 3, 3], -1.0, 1.0, rng)),
            ("b", Tensor::uniform([2, 3, 3, 3], -1.0, 1.0, rng)),
            ("c", Tensor::uniform([2, 2, 3, 3], -1.0, 1.0, rng)),
        ],
        &|g, ids| Ok(vec![g.concat_channels(ids)?]),
        rng,
    )?);
    out.extend(graph_check(
        "add",
        lin,
        LINEAR_STEP,
            false,
        &[
            ("a", Tensor::uniform([2, 3, 3, 2], -1.0, 1.0, rng)),
            ("b", Tensor::uniform([2, 3, 3, 2], -1.0, 1.0, rng)),
        ],
        &|g, ids| Ok(vec![g.add(ids)?]),
        rng,
    )?);
    for training in [true, false] {
        let mut running = BatchNormParams::new(3);
        running.running_mean = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        running.running_var = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
        out.extend(graph_check(
            if training { "batch_norm train" } else { "batch_norm eval" },
            if training { bn_tol } else { lin },
            if training { DEFAULT_STEP } else { LINEAR_STEP },
            false,
            &[
                ("x", Tensor::uniform([3, 3, 4, 4], -2.0, 2.0, rng)),
                ("gamma", Tensor::uniform([3, 1, 1, 1], 0.5, 1.5, rng)),
                ("beta", Tensor::uniform([3, 1, 1, 1], -0.5, 0.5, rng)),
            ],
            &|g, ids| Ok(vec![g.batch_norm(ids[0], ids[1], ids[2], &running, training)?.0]),
            rng,
        )?);
    }
    Ok(out)
}

fn loss_checks(rng: &mut ChaCha8Rng, tol: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let tol = tol.unwrap_or(LINEAR_TOLERANCE);
    let spec = PriorSpec {
        feature_size: 3,
        scale: 0.3,
        next_scale: 0.5,
        extra_ratios: vec![2.0],
    };
    let priors = generate_priors(&[spec])?;
    let p = priors.len();
    let k = 3;
    let batch = 2;
    let matches: Vec<_> = (0..batch)
        .map(|b| {
            let gt = GroundTruth::new(vec![clip_unit(&to_corner(&priors.boxes[5 + 7 * b])), [0.1, 0.55, 0.45, 0.95]], vec![1, 2])
                .expect("valid boxes");
            match_priors(&gt, &priors, 0.5, &Variances::default())
        })
        .collect();
    // Piecewise quadratic in the offsets, so the wide step is exact once no
    // residual sits near the smooth-L1 switch at 1.
    let mut loc: Vec<f64> = (0..batch * p * 4).map(|_| rng.gen_range(-0.8..0.8)).collect();
    for (b, m) in matches.iter().enumerate() {
        for (j, t) in m.targets.iter().enumerate() {
            for k in 0..4 {
                let v = &mut loc[(b * p + j) * 4 + k];
                if ((*v - t[k]).abs() - 1.0).abs() < 0.01 {
                    *v += 0.05;
                }
            }
        }
    }
    let conf: Vec<f64> = (0..batch * p * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mk = |loc: &[f64], conf: &[f64]| Predictions {
        batch,
        priors: p,
        classes: k,
        loc: loc.to_vec(),
        conf: conf.to_vec(),
    };
    let pred = mk(&loc, &conf);
    let neg = mine_batch(&pred, &matches, 3.0);
    let alpha = 1.0;
    let out = multibox_loss(&pred, &matches, &neg, alpha)?;
    Ok(vec![
        grad_check(
            "multibox_loss ∂conf",
            |c| multibox_loss(&mk(&loc, c), &matches, &neg, alpha).map_or(f64::NAN, |o| o.total),
            &conf,
            &out.conf_grad,
            None,
            DEFAULT_STEP,
            tol,
        ),
        grad_check(
            "multibox_loss ∂loc",
            |l| multibox_loss(&mk(l, &conf), &matches, &neg, alpha).map_or(f64::NAN, |o| o.total),
            &loc,
            &out.loc_grad,
            None,
            LINEAR_STEP,
            tol,
        ),
    ])
}

/// Narrow 64-input model with four taps and a four-level pyramid.
pub fn tiny_model_config() -> ModelConfig {
    let mut backbone = BackboneConfig::preset(64);
    backbone.stage_channels = vec![2, 3, 4, 4, 4];
    backbone.convs_per_stage = vec![1; 5];
    let fusion = FusionConfig {
        projection_channels: vec![3; 3],
        pyramid_channels: vec![4; 4],
        ..FusionConfig::default()
    };
    let priors = PriorConfig {
        extra_ratios: vec![vec![2.0], vec![2.0, 3.0], vec![2.0], vec![2.0]],
        ..PriorConfig::default()
    };
    let plain = crate::fusion::PlainPyramidConfig {
        extra_channels: vec![4],
        ..Default::default()
    };
    ModelConfig {
        backbone,
        fusion: Some(fusion),
        plain,
        priors,
        num_classes: 2,
    }
}

fn fusion_checks(rng: &mut ChaCha8Rng, tol: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let tol = tol.unwrap_or(END_TO_END_TOLERANCE);
    let bb = tiny_model_config().backbone;
    let mut out = Vec::new();
    let sources = [CONV3_3, CONV4_3, FC_7, CONV7_2];
    for (variant, op_sum, bn) in [
        (PyramidVariant::B, false, true),
        (PyramidVariant::A, false, false),
        (PyramidVariant::C, true, true),
    ] {
        let mut cfg = FusionConfig::default().with_sources(&sources, 3);
        cfg.pyramid_variant = variant;
        cfg.normalize_after_fusion = bn;
        cfg.pyramid_channels = vec![3; 4];
        if op_sum {
            cfg.fusion_op = crate::fusion::FusionOp::ElementSum;
        }
        let mut store = ParamStore::new();
        let module = FusionModule::build(cfg, &bb, &mut store, rng)?;
        let inputs: Vec<(&str, Tensor)> = sources
            .iter()
            .map(|&s| {
                let (size, ch) = (bb.tap_size(s).expect("tap"), bb.tap_channels(s).expect("tap"));
                (s, Tensor::uniform([2, ch, size, size], -1.0, 1.0, rng))
            })
            .collect();
        let shapes: Vec<[usize; 4]> = inputs.iter().map(|(_, t)| t.shape()).collect();
        let build = |g: &mut Graph, ids: &[NodeId]| -> Result<Vec<NodeId>> {
            let maps = sources
                .iter()
                .zip(ids)
                .zip(&shapes)
                .map(|((&name, &node), s)| FeatureMap {
                    name: name.into(),
                    node,
                    size: s[2],
                    channels: s[1],
                    stride: 64 / s[2],
                })
                .collect();
            let mut st = store.clone();
            let (_, pyramid) = module.forward(g, &mut st, &FeatureMapSet::new(maps)?, true)?;
            Ok(pyramid.levels)
        };
        out.extend(graph_check(&format!("fusion {variant:?}"), tol, DEFAULT_STEP, true, &inputs, &build, rng)?);
    }
    Ok(out)
}

fn end_to_end_check(rng: &mut ChaCha8Rng, tol: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let tol = tol.unwrap_or(END_TO_END_TOLERANCE);
    let mut out = Vec::new();
    for fusion in [true, false] {
        let mut cfg = tiny_model_config();
        if !fusion {
            cfg.fusion = None;
        }
        let mut store = ParamStore::new();
        let det = Detector::build(cfg, &mut store, rng)?;
        let images = Tensor::uniform([2, 3, 64, 64], -0.5, 0.5, rng);
        let gts = vec![
            GroundTruth::new(vec![[0.1, 0.1, 0.5, 0.45], [0.6, 0.5, 0.95, 0.9]], vec![1, 2])?,
            GroundTruth::new(vec![[0.3, 0.2, 0.7, 0.8]], vec![2])?,
        ];
        let loss_cfg = crate::model::LossConfig::default();
        let base = det.forward_loss(&mut store.clone(), &images, &gts, &loss_cfg, true)?;
        let negatives = mine_batch(&base.predictions, &base.matches, loss_cfg.neg_pos_ratio);
        let loss_at = |st: &ParamStore| -> f64 {
            let mut st = st.clone();
            let mut g = Graph::new();
            let x = g.constant(images.clone());
            let head = det.forward(&mut g, &mut st, x, true).expect("forward");
            let pred = det.head().flatten(&g, &head);
            multibox_loss(&pred, &base.matches, &negatives, loss_cfg.loc_weight).expect("loss").total
        };
        let mut st = store.clone();
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let head = det.forward(&mut g, &mut st, x, true)?;
        let pred = det.head().flatten(&g, &head);
        let loss = multibox_loss(&pred, &base.matches, &negatives, loss_cfg.loc_weight)?;
        let seeds = det.head().seeds(&g, &head, &loss.loc_grad, &loss.conf_grad);
        let grads = g.backward(seeds)?;
        let mut analytic = store.clone();
        analytic.zero_grads();
        analytic.accumulate_grads(&g, &grads);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.kind == crate::params::ParamKind::Trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names.iter().filter(|n| n.ends_with("weight") || n.ends_with("gamma")) {
            let p = store.get(name).expect("listed");
            let grad = analytic.get(name).and_then(|a| a.value.grad().map(<[f64]>::to_vec));
            let grad = grad.unwrap_or_else(|| vec![0.0; p.value.len()]);
            let point = p.value.data().to_vec();
            let shape = p.value.shape();
            let f = |v: &[f64]| {
                let mut s = store.clone();
                s.get_mut(name).expect("listed").value = Tensor::from_vec(shape, v.to_vec()).expect("same shape");
                loss_at(&s)
            };
            let idx = spread_indices(point.len(), 16);
            let label = if fusion { "detector" } else { "baseline" };
            out.push(grad_check_smooth(format!("{label} ∂{name}"), f, &point, &grad, &idx, 4, DEFAULT_STEP, tol));
        }
    }
    Ok(out)
}

/// Every check for one seed. `tolerance` overrides the per-family defaults.
pub fn run_suite(seed: u64, tolerance: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let _guard = PrecisionGuard::set(GemmPrecision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = kernel_checks(&mut rng, tolerance)?;
    out.extend(loss_checks(&mut rng, tolerance)?);
    out.extend(fusion_checks(&mut rng, tolerance)?);
    out.extend(end_to_end_check(&mut rng, tolerance)?);
    Ok(out)
}
