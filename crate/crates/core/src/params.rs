//! Named parameter storage shared by every network component.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::batchnorm::{BatchNormParams, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::tensor::graph::{Gradients, Graph, NodeId};
use crate::tensor::optim::{sgd_momentum_step, Sgd};
use crate::tensor::{ConvGeometry, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// Running statistics; saved and loaded but never differentiated.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
    pub velocity: Vec<f64>,
}

/// Ordered name → tensor map. Iteration order is lexicographic, which keeps
/// checkpoints and optimiser sweeps deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

/// `[len, 1, 1, 1]`, the shape used for vectors.
pub fn vector_shape(len: usize) -> [usize; 4] {
    [len, 1, 1, 1]
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                kind,
                velocity: Vec::new(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count, optionally restricted to a name prefix.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, p)| p.kind == ParamKind::Trainable && k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Registers `<prefix>.weight` (Xavier-uniform) and `<prefix>.bias` (zeros).
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.add_conv_init(prefix, [out_channels, in_channels, kernel, kernel], Tensor::xavier_uniform, rng)
    }

    /// As [`add_conv`](Self::add_conv) with He-uniform weights, for
    /// convolutions followed by a ReLU.
    pub fn add_relu_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.add_conv_init(prefix, [out_channels, in_channels, kernel, kernel], Tensor::he_uniform, rng)
    }

    fn add_conv_init<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        shape: [usize; 4],
        init: fn(Shape, &mut R) -> Tensor,
        rng: &mut R,
    ) -> Result<()> {
        let [out_channels, in_channels, ..] = shape;
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("`{prefix}`: zero-width convolution")));
        }
        let w = init(shape, rng);
        self.insert(format!("{prefix}.weight"), w, ParamKind::Trainable);
        self.insert(
            format!("{prefix}.bias"),
            Tensor::zeros(vector_shape(out_channels)),
            ParamKind::Trainable,
        );
        Ok(())
    }

    /// Registers gamma = 1, beta = 0 and running mean/var buffers.
    pub fn add_batch_norm(&mut self, prefix: &str, channels: usize) {
        let shape = vector_shape(channels);
        self.insert(format!("{prefix}.gamma"), Tensor::full(shape, 1.0), ParamKind::Trainable);
        self.insert(format!("{prefix}.beta"), Tensor::zeros(shape), ParamKind::Trainable);
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer);
        self.insert(format!("{prefix}.running_var"), Tensor::full(shape, 1.0), ParamKind::Buffer);
    }

    fn node(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let t = self.tensor(name)?;
        Ok(g.param(name, t))
    }

    /// Records a convolution whose weights live under `prefix`.
    pub fn conv(&self, g: &mut Graph, prefix: &str, x: NodeId, geo: ConvGeometry) -> Result<NodeId> {
        let w = self.node(g, &format!("{prefix}.weight"))?;
        let b = self.node(g, &format!("{prefix}.bias"))?;
        g.conv2d(x, w, b, geo)
    }

    /// Records batch norm under `prefix`, folding batch statistics into the
    /// running buffers when training.
    pub fn batch_norm(&mut self, g: &mut Graph, prefix: &str, x: NodeId, training: bool) -> Result<NodeId> {
        let gamma = self.node(g, &format!("{prefix}.gamma"))?;
        let beta = self.node(g, &format!("{prefix}.beta"))?;
        let mut running = self.batch_norm_params(prefix)?;
        let (y, stats) = g.batch_norm(x, gamma, beta, &running, training)?;
        if let Some(stats) = stats {
            running.update_running(&stats);
            self.write_running(prefix, &running)?;
        }
        Ok(y)
    }

    pub fn batch_norm_params(&self, prefix: &str) -> Result<BatchNormParams> {
        Ok(BatchNormParams {
            gamma: self.tensor(&format!("{prefix}.gamma"))?.data().to_vec(),
            beta: self.tensor(&format!("{prefix}.beta"))?.data().to_vec(),
            running_mean: self.tensor(&format!("{prefix}.running_mean"))?.data().to_vec(),
            running_var: self.tensor(&format!("{prefix}.running_var"))?.data().to_vec(),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    fn write_running(&mut self, prefix: &str, p: &BatchNormParams) -> Result<()> {
        for (suffix, src) in [("running_mean", &p.running_mean), ("running_var", &p.running_var)] {
            let name = format!("{prefix}.{suffix}");
            let entry = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            entry.value.data_mut().copy_from_slice(src);
        }
        Ok(())
    }

    /// Adds the gradients of every parameter node in `g` into the stored
    /// gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, grads: &Gradients) {
        for (name, id) in g.params() {
            if let (Some(entry), Some(grad)) = (self.entries.get_mut(name), grads.get(id)) {
                if entry.kind == ParamKind::Trainable {
                    entry.value.accumulate_grad(grad.data());
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.value.zero_grad();
        }
    }

    /// First parameter whose value or gradient is not finite.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, p)| !p.value.is_finite() || p.value.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            .map(|(k, _)| k.as_str())
    }

    /// One SGD step over every trainable parameter. Parameters that never
    /// received a gradient still decay and coast on momentum.
    pub fn sgd_step(&mut self, opt: &Sgd, lr: f64, multiplier: impl Fn(&str) -> f64) {
        for (name, p) in self.entries.iter_mut() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            if p.velocity.len() != p.value.len() {
                p.velocity = vec![0.0; p.value.len()];
            }
            let m = multiplier(name);
            let (data, grad) = p.value.data_and_grad_mut();
            let zeros;
            let grad = match grad {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; data.len()];
                    &zeros
                }
            };
            sgd_momentum_step(data, grad, &mut p.velocity, lr, opt.momentum, opt.weight_decay, m);
        }
    }

    /// Rounds every stored value and velocity to `f32` precision, the
    /// precision checkpoints hold.
    pub fn quantize_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
            for v in p.velocity.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
