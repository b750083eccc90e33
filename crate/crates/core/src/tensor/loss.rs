//! Row-wise cross-entropy and smooth-L1, the two halves of the multibox objective.

use crate::error::{Error, Result};

/// Per-row negative log-likelihood plus the softmax it was computed from.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: Vec<f64>,
    /// Row-major `(rows, classes)` softmax probabilities.
    pub probs: Vec<f64>,
    pub classes: usize,
}

impl CrossEntropy {
    /// `softmax − one_hot(target)` for one row.
    pub fn row_grad(&self, row: usize, target: usize) -> Vec<f64> {
        let mut g = self.probs[row * self.classes..(row + 1) * self.classes].to_vec();
        g[target] -= 1.0;
        g
    }
}

/// Max-subtracted log-sum-exp of one row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy over a `(rows, classes)` row-major logit matrix.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, targets: &[usize]) -> Result<CrossEntropy> {
    if classes == 0 || logits.len() != targets.len() * classes {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} logits for {} rows × {classes} classes", logits.len(), targets.len()),
        ));
    }
    let mut loss = Vec::with_capacity(targets.len());
    let mut probs = Vec::with_capacity(logits.len());
    for (row, &t) in logits.chunks(classes).zip(targets) {
        if t >= classes {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("target {t} outside [0, {classes})"),
            ));
        }
        let lse = log_sum_exp(row);
        loss.push(lse - row[t]);
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    Ok(CrossEntropy {
        loss,
        probs,
        classes,
    })
}

/// `0.5·d²` for `|d| < 1`, else `|d| − 0.5`, with `d = pred − target`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(Error::shape("smooth_l1", "prediction and target lengths differ"));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .collect())
}

/// Derivative of [`smooth_l1`] with respect to `pred`: `clamp(d, −1, 1)`.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).clamp(-1.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let ce = softmax_cross_entropy(&[0.3; 12], 4, &[0, 1, 3]).unwrap();
        for l in ce.loss {
            assert!((l - 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_target_has_near_zero_loss() {
        let ce = softmax_cross_entropy(&[0.0, 100.0, 0.0], 3, &[1]).unwrap();
        assert!(ce.loss[0] < 1e-40);
    }

    #[test]
    fn random_case_matches_naive_formula() {
        // The naive exp/sum/log is exact enough in this logit range to serve
        // as an independent reference.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = [0, 3, 2, 1, 3];
        let ce = softmax_cross_entropy(&logits, 4, &targets).unwrap();
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * 4..r * 4 + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let expected = -(row[t].exp() / z).ln();
            assert!((ce.loss[r] - expected).abs() <= 1e-10 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn out_of_range_target_rejected() {
        assert!(softmax_cross_entropy(&[0.0; 4], 2, &[0, 2]).is_err());
    }

    #[test]
    fn smooth_l1_formula() {
        assert_eq!(smooth_l1(&[1.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), vec![0.125]);
        assert_eq!(smooth_l1(&[3.0], &[0.0]).unwrap(), vec![2.5]);
        assert_eq!(smooth_l1(&[-3.0], &[0.0]).unwrap(), vec![2.5]);
        assert_eq!(smooth_l1_grad(&[3.0, 0.25, -7.0], &[0.0; 3]), vec![1.0, 0.25, -1.0]);
    }
}
