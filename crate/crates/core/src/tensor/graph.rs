//! A reverse-mode tape over the kernels in this module.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. Values are immutable once recorded.

use std::collections::BTreeMap;

use super::batchnorm::{batch_norm, batch_norm_backward, BatchNormParams, BatchStats};
use super::conv::{conv2d, conv2d_backward_parts, ConvGeometry};
use super::elementwise::{concat_channels, elementwise_add, relu, relu_backward, slice_channels};
use super::pool::{max_pool2d, max_pool2d_backward};
use super::resize::{bilinear_resize, bilinear_resize_backward};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geo: ConvGeometry,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Resize {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        epsilon: f64,
        training: bool,
    },
    Relu {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Add {
        xs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
            Op::MaxPool { x, .. } | Op::Resize { x } | Op::Relu { x } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs } | Op::Add { xs } => xs.clone(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients for every node reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is computed.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Leaf that never receives a gradient, such as the input image.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter; the same name always yields the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let mut v = value.clone();
        v.clear_grad();
        let id = self.push(v, Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// `b` holds one bias per filter in any shape with that many elements.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geo: ConvGeometry) -> Result<NodeId> {
        let y = conv2d(self.value(x), self.value(w), self.value(b).data(), geo)?;
        Ok(self.push(y, Op::Conv { x, w, b, geo }))
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, ceil_mode: bool) -> Result<NodeId> {
        let p = max_pool2d(self.value(x), kernel, stride, ceil_mode)?;
        Ok(self.push(p.output, Op::MaxPool { x, argmax: p.argmax }))
    }

    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let y = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        let y = concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        let y = elementwise_add(&vals)?;
        Ok(self.push(y, Op::Add { xs: xs.to_vec() }))
    }

    /// Batch norm with affine parameters taken from graph nodes and running
    /// statistics from `running` (only its mean/var/epsilon are read).
    /// Returns the batch statistics in training mode so the caller can fold
    /// them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &BatchNormParams,
        training: bool,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let p = BatchNormParams {
            gamma: self.value(gamma).data().to_vec(),
            beta: self.value(beta).data().to_vec(),
            ..running.clone()
        };
        let out = batch_norm(self.value(x), &p, training)?;
        let mean = match &out.stats {
            Some(s) => s.mean.clone(),
            None => p.running_mean.clone(),
        };
        let id = self.push(
            out.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std: out.inv_std,
                epsilon: p.epsilon,
                training,
            },
        );
        Ok((id, out.stats))
    }

    /// Propagates the seeded output gradients to every upstream node.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::shape("Graph::backward", "seed shape differs from node"));
            }
            accumulate(&mut grads[id.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geo } => {
                    let need_input = self.nodes[x.0].requires_grad;
                    let (dx, dw, db) = conv2d_backward_parts(self.value(*x), self.value(*w), *geo, &gy, need_input)?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], dw);
                    let bshape = self.value(*b).shape();
                    accumulate(&mut grads[b.0], Tensor::from_vec(bshape, db)?);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = max_pool2d_backward(self.value(*x).shape(), argmax, &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Resize { x } => {
                    let dx = bilinear_resize_backward(self.value(*x).shape(), &gy)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Relu { x } => {
                    let dx = relu_backward(self.value(*x), &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat { xs } => {
                    let mut start = 0;
                    for x in xs {
                        let c = self.value(*x).channels();
                        accumulate(&mut grads[x.0], slice_channels(&gy, start, c)?);
                        start += c;
                    }
                }
                Op::Add { xs } => {
                    for x in xs {
                        accumulate(&mut grads[x.0], gy.clone());
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    epsilon,
                    training,
                } => {
                    let c = self.value(*x).channels();
                    let p = BatchNormParams {
                        gamma: self.value(*gamma).data().to_vec(),
                        beta: self.value(*beta).data().to_vec(),
                        running_mean: vec![0.0; c],
                        running_var: vec![1.0; c],
                        epsilon: *epsilon,
                        momentum: 0.0,
                    };
                    let g = batch_norm_backward(self.value(*x), &p, mean, inv_std, *training, &gy)?;
                    accumulate(&mut grads[x.0], g.input);
                    let gs = self.value(*gamma).shape();
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(gs, g.gamma)?);
                    let bs = self.value(*beta).shape();
                    accumulate(&mut grads[beta.0], Tensor::from_vec(bs, g.beta)?);
                }
            }
            // Leaves keep their gradient so callers can read it.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 1, 1, 2], 2.0));
        let y = g.add(&[x, x]).unwrap();
        let grads = g.backward(vec![(y, Tensor::full([1, 1, 1, 2], 1.0))]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn param_nodes_are_deduplicated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::uniform([2, 1, 1, 1], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        assert_eq!(g.params().count(), 1);
    }

    #[test]
    fn concat_backward_slices_blocks() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros([1, 1, 1, 1]));
        let b = g.input(Tensor::zeros([1, 2, 1, 1]));
        let y = g.concat_channels(&[a, b]).unwrap();
        let seed = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let grads = g.backward(vec![(y, seed)]).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0]);
    }
}
