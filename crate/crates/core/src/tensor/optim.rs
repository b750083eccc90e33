//! SGD with momentum, weight decay and per-parameter learning-rate multipliers.

/// One update of a single parameter buffer:
///
/// `v ← momentum·v + (grad + weight_decay·param)`,
/// `param ← param − lr·multiplier·v`.
pub fn sgd_momentum_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    multiplier: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    let step = lr * multiplier;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= step * *v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.5, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0, 1.0);
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0, 2.0);
        assert_eq!(p, vec![1.0 - 0.1 * 2.0 * 0.5, 2.0 + 0.1 * 2.0 * 1.0]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.01, 0.9, 5e-4);
        let (g1, g2) = (0.3, -0.7);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[g1], &mut v, lr, mu, wd, 1.0);
        sgd_momentum_step(&mut p, &[g2], &mut v, lr, mu, wd, 1.0);
        let v1 = g1 + wd * 1.0;
        let p1 = 1.0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((p[0] - p2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }
}
