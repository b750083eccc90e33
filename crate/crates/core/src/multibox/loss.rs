//! Joint confidence + localisation objective.

use crate::error::{Error, Result};
use crate::multibox::matching::MatchResult;
use crate::multibox::mining::hard_negative_mine;
use crate::multibox::Predictions;
use crate::tensor::loss::{log_sum_exp, smooth_l1, smooth_l1_grad, softmax_cross_entropy};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub num_pos: usize,
    /// d total / d loc, `(N, priors, 4)`.
    pub loc_grad: Vec<f64>,
    /// d total / d conf, `(N, priors, K)`.
    pub conf_grad: Vec<f64>,
}

/// Background cross-entropy per prior, used to rank negatives.
pub fn background_loss(conf: &[f64], classes: usize) -> Vec<f64> {
    conf.chunks(classes).map(|row| log_sum_exp(row) - row[0]).collect()
}

/// Hard negatives for every image of the batch.
pub fn mine_batch(pred: &Predictions, matches: &[MatchResult], ratio: f64) -> Vec<Vec<usize>> {
    matches
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let bg = background_loss(pred.conf_image(b), pred.classes);
            let pos: Vec<bool> = m.matched.iter().map(Option::is_some).collect();
            hard_negative_mine(&bg, &pos, ratio)
        })
        .collect()
}

/// `(Σ_{pos ∪ neg} CE + α·Σ_pos SmoothL1) / max(N_pos, 1)`, with `N_pos`
/// counted over the whole batch.
pub fn multibox_loss(
    pred: &Predictions,
    matches: &[MatchResult],
    negatives: &[Vec<usize>],
    alpha: f64,
) -> Result<LossOutput> {
    if matches.len() != pred.batch || negatives.len() != pred.batch {
        return Err(Error::shape("multibox_loss", "batch size differs from match/negative lists"));
    }
    if let Some(m) = matches.iter().find(|m| m.matched.len() != pred.priors) {
        return Err(Error::shape(
            "multibox_loss",
            format!("{} matches for {} priors", m.matched.len(), pred.priors),
        ));
    }
    let k = pred.classes;
    let num_pos: usize = matches.iter().map(MatchResult::num_positive).sum();
    let norm = num_pos.max(1) as f64;
    let mut loc_grad = vec![0.0; pred.loc.len()];
    let mut conf_grad = vec![0.0; pred.conf.len()];
    let (mut loc_sum, mut conf_sum) = (0.0, 0.0);

    for (b, (m, neg)) in matches.iter().zip(negatives).enumerate() {
        let mut rows: Vec<usize> = (0..pred.priors).filter(|&i| m.is_positive(i)).collect();
        rows.extend(neg.iter().copied().filter(|&i| !m.is_positive(i)));
        let conf_img = pred.conf_image(b);
        let logits: Vec<f64> = rows.iter().flat_map(|&i| conf_img[i * k..(i + 1) * k].iter().copied()).collect();
        let targets: Vec<usize> = rows.iter().map(|&i| m.labels[i]).collect();
        let ce = softmax_cross_entropy(&logits, k, &targets)?;
        conf_sum += ce.loss.iter().sum::<f64>();
        for (r, (&i, &t)) in rows.iter().zip(&targets).enumerate() {
            let g = ce.row_grad(r, t);
            let base = (b * pred.priors + i) * k;
            for (dst, v) in conf_grad[base..base + k].iter_mut().zip(g) {
                *dst += v / norm;
            }
        }
        for i in (0..pred.priors).filter(|&i| m.is_positive(i)) {
            let base = (b * pred.priors + i) * 4;
            let p = &pred.loc[base..base + 4];
            loc_sum += smooth_l1(p, &m.targets[i])?.iter().sum::<f64>();
            for (dst, v) in loc_grad[base..base + 4].iter_mut().zip(smooth_l1_grad(p, &m.targets[i])) {
                *dst += alpha * v / norm;
            }
        }
    }
    let loc = alpha * loc_sum / norm;
    let conf = conf_sum / norm;
    Ok(LossOutput {
        total: loc + conf,
        loc,
        conf,
        num_pos,
        loc_grad,
        conf_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{encode, Variances};
    use crate::multibox::matching::{match_priors, GroundTruth};
    use crate::multibox::priors::PriorBoxSet;

    /// Six priors in a row, one GT overlapping priors 1 and 2.
    fn fixture() -> (PriorBoxSet, GroundTruth) {
        let boxes: Vec<[f64; 4]> = (0..6).map(|i| [0.1 + 0.15 * i as f64, 0.5, 0.2, 0.2]).collect();
        let priors = PriorBoxSet {
            level: vec![0; 6],
            boxes,
            specs: vec![],
        };
        let gt = GroundTruth::new(vec![[0.18, 0.41, 0.38, 0.59]], vec![2]).unwrap();
        (priors, gt)
    }

    #[test]
    fn hand_computed_six_prior_case() {
        let (priors, gt) = fixture();
        let v = Variances::default();
        let m = match_priors(&gt, &priors, 0.5, &v);
        // Prior 1 spans [0.15, 0.35]; IoU with the GT = 0.0306/0.0454 ≈ 0.67.
        // Prior 2 spans [0.30, 0.50]; IoU = 0.0144/0.0616 ≈ 0.23.
        assert_eq!(m.matched, vec![None, Some(0), None, None, None, None]);
        let k = 3;
        let conf: Vec<f64> = vec![
            0.0, 0.0, 0.0, // 0
            0.5, 0.0, 1.0, // 1 positive, label 2
            0.0, 2.0, 0.0, // 2
            1.0, 0.0, 0.0, // 3
            0.0, 0.0, 3.0, // 4
            0.0, 1.0, 1.0, // 5
        ];
        let mut loc = vec![0.0; 24];
        loc[4..8].copy_from_slice(&[0.3, -0.2, 0.0, 1.5]);
        let pred = Predictions {
            batch: 1,
            priors: 6,
            classes: k,
            loc,
            conf,
        };
        let neg = mine_batch(&pred, std::slice::from_ref(&m), 3.0);
        // background CE: lse(row) − row[0]; hardest are 4 (3.0 margin), 2, 5.
        assert_eq!(neg[0], vec![4, 2, 5]);
        let out = multibox_loss(&pred, std::slice::from_ref(&m), &neg, 1.0).unwrap();

        let ce = |row: [f64; 3], t: usize| {
            let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let conf_expected = ce([0.5, 0.0, 1.0], 2) + ce([0.0, 0.0, 3.0], 0) + ce([0.0, 2.0, 0.0], 0) + ce([0.0, 1.0, 1.0], 0);
        let t = encode(&gt.boxes[0], &priors.boxes[1], &v);
        let sl1 = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        let loc_expected = sl1(0.3 - t[0]) + sl1(-0.2 - t[1]) + sl1(0.0 - t[2]) + sl1(1.5 - t[3]);
        assert!((out.conf - conf_expected).abs() < 1e-12);
        assert!((out.loc - loc_expected).abs() < 1e-12);
        assert!((out.total - conf_expected - loc_expected).abs() < 1e-12);
        assert_eq!(out.num_pos, 1);
    }

    #[test]
    fn perfect_predictions_give_zero_loss_terms() {
        let (priors, gt) = fixture();
        let v = Variances::default();
        let m = match_priors(&gt, &priors, 0.5, &v);
        let mut loc = vec![0.0; 24];
        loc[4..8].copy_from_slice(&m.targets[1]);
        let mut conf = vec![0.0; 18];
        for (i, row) in conf.chunks_mut(3).enumerate() {
            row[m.labels[i]] = 100.0;
        }
        let pred = Predictions {
            batch: 1,
            priors: 6,
            classes: 3,
            loc,
            conf,
        };
        let neg = mine_batch(&pred, std::slice::from_ref(&m), 3.0);
        let out = multibox_loss(&pred, std::slice::from_ref(&m), &neg, 1.0).unwrap();
        assert_eq!(out.loc, 0.0);
        assert!(out.conf < 1e-40);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::{grad_check, DEFAULT_STEP};
        let (priors, gt) = fixture();
        let m = match_priors(&gt, &priors, 0.5, &Variances::default());
        let conf: Vec<f64> = (0..18).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let loc: Vec<f64> = (0..24).map(|i| ((i * 3) % 7) as f64 * 0.1 - 0.3).collect();
        let mk = |loc: &[f64], conf: &[f64]| Predictions {
            batch: 1,
            priors: 6,
            classes: 3,
            loc: loc.to_vec(),
            conf: conf.to_vec(),
        };
        let pred = mk(&loc, &conf);
        let neg = mine_batch(&pred, std::slice::from_ref(&m), 3.0);
        let out = multibox_loss(&pred, std::slice::from_ref(&m), &neg, 1.0).unwrap();
        let r = grad_check(
            "conf",
            |c| multibox_loss(&mk(&loc, c), std::slice::from_ref(&m), &neg, 1.0).unwrap().total,
            &conf,
            &out.conf_grad,
            None,
            DEFAULT_STEP,
            1e-7,
        );
        assert!(r.passed(), "{r}");
        let r = grad_check(
            "loc",
            |l| multibox_loss(&mk(l, &conf), std::slice::from_ref(&m), &neg, 1.0).unwrap().total,
            &loc,
            &out.loc_grad,
            None,
            DEFAULT_STEP,
            1e-7,
        );
        assert!(r.passed(), "{r}");
    }
}
