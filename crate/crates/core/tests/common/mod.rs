//! Brute-force reference implementations and sweeps shared by the
//! integration tests.

#![allow(dead_code)]

use fssd::boxes::{decode_unclipped, encode, iou, to_corner, CornerBox, Variances};
use fssd::multibox::{generate_priors, match_priors, GroundTruth, PriorBoxSet, PriorSpec};
use fssd::postprocess::nms;
use fssd::tensor::{conv2d, ConvGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn conv_direct(x: &Tensor, w: &Tensor, b: &[f64], geo: ConvGeometry) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let [o, _, kh, kw] = w.shape();
    let oh = geo.output_size(h, kh).unwrap();
    let ow = geo.output_size(wd, kw).unwrap();
    let mut out = Tensor::zeros([n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (y * geo.stride + ki) as isize - geo.padding as isize;
                                let ix = (xx * geo.stride + kj) as isize - geo.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(ni, ci, iy as usize, ix as usize) * w.at(oi, ci, ki, kj);
                                }
                            }
                        }
                    }
                    let i = out.index(ni, oi, y, xx);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

/// Every shape with channels, spatial sizes and kernel up to 6, strides 1–2
/// and padding 0–1 that yields an output; returns (cases, worst error).
pub fn conv_sweep() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for c in [1, 2, 3, 6] {
        for o in [1, 2, 5] {
            for h in 1..=6 {
                for w in 1..=6 {
                    for k in 1..=6 {
                        for stride in 1..=2 {
                            for padding in 0..=1 {
                                let geo = ConvGeometry::new(stride, padding);
                                if geo.output_size(h, k).is_none() || geo.output_size(w, k).is_none() {
                                    continue;
                                }
                                let x = Tensor::uniform([2, c, h, w], -1.0, 1.0, &mut rng);
                                let wt = Tensor::uniform([o, c, k, k], -1.0, 1.0, &mut rng);
                                let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
                                let got = conv2d(&x, &wt, &b, geo).unwrap();
                                worst = worst.max(got.max_abs_diff(&conv_direct(&x, &wt, &b, geo)));
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (cases, worst)
}

pub fn random_box(rng: &mut impl Rng) -> CornerBox {
    let w = rng.gen_range(0.02..0.6);
    let h = rng.gen_range(0.02..0.6);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    [x, y, x + w, y + h]
}

/// Textbook greedy NMS: repeatedly take the best remaining box and delete
/// everything overlapping it.
pub fn nms_brute(boxes: &[CornerBox], scores: &[f64], t: f64, top_k: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() && keep.len() < top_k {
        let mut best = 0;
        for (pos, &i) in remaining.iter().enumerate() {
            let b = remaining[best];
            if scores[i] > scores[b] || (scores[i] == scores[b] && i < b) {
                best = pos;
            }
        }
        let chosen = remaining.remove(best);
        keep.push(chosen);
        remaining.retain(|&j| iou(&boxes[chosen], &boxes[j]) <= t);
    }
    keep
}

/// 1000 random sets, including duplicated boxes and tied scores.
pub fn nms_sweep() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.gen_range(0..40);
        let mut boxes: Vec<CornerBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let mut scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        if n > 2 && case % 3 == 0 {
            boxes[1] = boxes[0];
            scores[1] = scores[0];
        }
        let t = [0.3, 0.45, 0.5, 0.7][case % 4];
        let top_k = if case % 5 == 0 { 3 } else { 200 };
        if nms(&boxes, &scores, t, top_k) != nms_brute(&boxes, &scores, t, top_k) {
            mismatches += 1;
        }
    }
    mismatches
}

pub fn small_priors() -> PriorBoxSet {
    let spec = |f, s, n, r: Vec<f64>| PriorSpec {
        feature_size: f,
        scale: s,
        next_scale: n,
        extra_ratios: r,
    };
    generate_priors(&[
        spec(6, 0.1, 0.25, vec![2.0]),
        spec(3, 0.25, 0.5, vec![2.0, 3.0]),
        spec(1, 0.5, 0.9, vec![2.0]),
    ])
    .unwrap()
}

/// Per-prior GT index from the full IoU matrix.
pub fn match_oracle(gt: &GroundTruth, priors: &PriorBoxSet, threshold: f64) -> Vec<Option<usize>> {
    let p = priors.len();
    let m: Vec<Vec<f64>> = gt
        .boxes
        .iter()
        .map(|g| priors.boxes.iter().map(|b| iou(g, &to_corner(b))).collect())
        .collect();
    let mut out = vec![None; p];
    let mut gt_done = vec![false; gt.len()];
    let mut prior_taken = vec![false; p];
    for _ in 0..gt.len().min(p) {
        let mut best: Option<(usize, usize)> = None;
        for (g, row) in m.iter().enumerate() {
            if gt_done[g] {
                continue;
            }
            for (j, &v) in row.iter().enumerate() {
                if prior_taken[j] {
                    continue;
                }
                if best.is_none_or(|(bg, bj)| v > m[bg][bj]) {
                    best = Some((g, j));
                }
            }
        }
        let (g, j) = best.unwrap();
        gt_done[g] = true;
        prior_taken[j] = true;
        out[j] = Some(g);
    }
    for j in 0..p {
        if prior_taken[j] {
            continue;
        }
        let mut best: Option<usize> = None;
        for g in 0..gt.len() {
            if best.is_none_or(|b| m[g][j] > m[b][j]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            if m[g][j] >= threshold {
                out[j] = Some(g);
            }
        }
    }
    out
}

/// 200 random images; returns the number whose assignment, labels or
/// targets disagree with the oracle.
pub fn matching_sweep() -> usize {
    let priors = small_priors();
    let v = Variances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bad = 0;
    for case in 0..200 {
        let n = rng.gen_range(0..8);
        let mut boxes: Vec<CornerBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        if n > 1 && case % 4 == 0 {
            boxes[1] = boxes[0];
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..4)).collect();
        let gt = GroundTruth::new(boxes, labels).unwrap();
        let threshold = [0.5, 0.3, 0.7][case % 3];
        let want = match_oracle(&gt, &priors, threshold);
        let got = match_priors(&gt, &priors, threshold, &v);
        let ok = got.matched == want
            && (0..priors.len()).all(|j| match want[j] {
                Some(g) => got.labels[j] == gt.labels[g] && got.targets[j] == encode(&gt.boxes[g], &priors.boxes[j], &v),
                None => got.labels[j] == 0 && got.targets[j] == [0.0; 4],
            });
        if !ok {
            bad += 1;
        }
    }
    bad
}

/// Worst coordinate error of decode(encode(g, p), p) over 10⁴ random pairs.
pub fn round_trip_sweep() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let v = Variances::default();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let g = random_box(&mut rng);
        let p = {
            let b = random_box(&mut rng);
            [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
        };
        let back = decode_unclipped(&encode(&g, &p, &v), &p, &v);
        for k in 0..4 {
            worst = worst.max((back[k] - g[k]).abs());
        }
    }
    worst
}

pub const SMOKE_CONFIG: &str = include_str!("../../configs/smoke.json");

pub fn smoke_run() -> fssd::harness::RunConfig {
    fssd::harness::RunConfig::from_json(SMOKE_CONFIG).unwrap()
}
