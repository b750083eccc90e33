use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Per-channel affine parameters and running statistics.
///
/// `momentum` weights the old running value:
/// `running ← momentum·running + (1 − momentum)·batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * stats.mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * stats.var[c] * correction;
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let out = batch_norm(x, self, training)?;
        if let Some(stats) = out.stats.as_ref() {
            self.update_running(stats);
        }
        Ok(out.output)
    }
}

/// Biased per-channel batch statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub output: Tensor,
    /// Present in training mode only.
    pub stats: Option<BatchStats>,
    /// `1 / sqrt(var + ε)` for whichever variance normalised the input.
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn check(x: &Tensor, p: &BatchNormParams) -> Result<()> {
    if x.channels() != p.channels() || p.beta.len() != p.channels() {
        return Err(Error::shape(
            "batch_norm",
            format!("{} input channels, {} parameters", x.channels(), p.channels()),
        ));
    }
    if p.epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm", "epsilon must be positive"));
    }
    Ok(())
}

/// Normalises each channel over `(N, H, W)`; batch statistics in training
/// mode, running statistics otherwise. Running statistics are not touched
/// here (see [`BatchNormParams::update_running`]).
pub fn batch_norm(x: &Tensor, p: &BatchNormParams, training: bool) -> Result<BatchNormOutput> {
    check(x, p)?;
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = n * hw;
    let (mean, var, stats) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x.plane(b, ch).iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut v = 0.0;
            for b in 0..n {
                v += x.plane(b, ch).iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / count as f64;
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        };
        (mean, var, Some(stats))
    } else {
        (p.running_mean.clone(), p.running_var.clone(), None)
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut output = Tensor::zeros(x.shape());
    let out = output.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let (scale, shift) = (p.gamma[ch] * inv_std[ch], p.beta[ch]);
            let mu = mean[ch];
            let base = (b * c + ch) * hw;
            for (o, &v) in out[base..base + hw].iter_mut().zip(x.plane(b, ch)) {
                *o = (v - mu) * scale + shift;
            }
        }
    }
    Ok(BatchNormOutput {
        output,
        stats,
        inv_std,
    })
}

/// Gradients of [`batch_norm`]. `inv_std` and `mean` must be the values the
/// forward pass normalised with.
pub fn batch_norm_backward(
    x: &Tensor,
    p: &BatchNormParams,
    mean: &[f64],
    inv_std: &[f64],
    training: bool,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    check(x, p)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("batch_norm_backward", "gradient shape differs from input"));
    }
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..n {
            for (&dy, &v) in grad_out.plane(b, ch).iter().zip(x.plane(b, ch)) {
                sum_dy += dy;
                sum_dy_xhat += dy * (v - mu) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = p.gamma[ch] * is;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            let d = &mut dx.data_mut()[base..base + hw];
            for ((o, &dy), &v) in d.iter_mut().zip(grad_out.plane(b, ch)).zip(x.plane(b, ch)) {
                *o = if training {
                    let xhat = (v - mu) * is;
                    g * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * dy
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn channel_moments(t: &Tensor, ch: usize) -> (f64, f64) {
        let vals: Vec<f64> = (0..t.batch()).flat_map(|b| t.plane(b, ch).to_vec()).collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        (mu, var)
    }

    #[test]
    fn training_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform([2, 3, 2, 2], -3.0, 5.0, &mut rng);
        let y = batch_norm(&x, &BatchNormParams::new(3), true).unwrap().output;
        for ch in 0..3 {
            let (mu, var) = channel_moments(&y, ch);
            assert!(mu.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
        }
    }

    #[test]
    fn already_standard_input_is_nearly_unchanged() {
        // Two values ±1 per channel: mean 0, biased variance 1.
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let y = batch_norm(&x, &BatchNormParams::new(1), true).unwrap().output;
        let shrink = 1.0 / (1.0f64 + DEFAULT_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * shrink).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn direct_formula_fixture() {
        let vals: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.5 - 1.0).collect();
        let x = Tensor::from_vec([2, 3, 2, 2], vals).unwrap();
        let mut p = BatchNormParams::new(3);
        p.gamma = vec![1.5, -0.5, 2.0];
        p.beta = vec![0.1, 0.2, -0.3];
        let y = batch_norm(&x, &p, true).unwrap().output;
        for ch in 0..3 {
            let xs: Vec<f64> = (0..2).flat_map(|b| x.plane(b, ch).to_vec()).collect();
            let mu: f64 = xs.iter().sum::<f64>() / 8.0;
            let var: f64 = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            for b in 0..2 {
                for (i, &v) in x.plane(b, ch).iter().enumerate() {
                    let e = p.gamma[ch] * (v - mu) / (var + 1e-5).sqrt() + p.beta[ch];
                    assert!((y.plane(b, ch)[i] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_variance_channel_is_finite() {
        let x = Tensor::full([4, 2, 3, 3], 2.0);
        let y = batch_norm(&x, &BatchNormParams::new(2), true).unwrap().output;
        assert!(y.is_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_uses_running_stats_and_training_updates_them() {
        let mut p = BatchNormParams::new(1);
        p.running_mean = vec![1.0];
        p.running_var = vec![4.0];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let y = batch_norm(&x, &p, false).unwrap().output;
        let s = (4.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - 2.0 / s).abs() < 1e-12);
        p.forward(&x, true).unwrap();
        // batch mean 4, biased var 1, unbiased 2
        assert!((p.running_mean[0] - (0.9 + 0.4)).abs() < 1e-12);
        assert!((p.running_var[0] - (3.6 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        assert!(batch_norm(&Tensor::zeros([1, 2, 1, 1]), &BatchNormParams::new(3), true).is_err());
    }
}
