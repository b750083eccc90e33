//! Per-level 3×3 localisation and confidence convolutions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::PyramidFeatures;
use crate::multibox::Predictions;
use crate::params::ParamStore;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{ConvGeometry, Tensor};

pub const PREFIX: &str = "head";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiboxHead {
    anchors: Vec<usize>,
    sizes: Vec<usize>,
    classes: usize,
}

/// Raw per-level head outputs: `(N, 4·A, f, f)` and `(N, K·A, f, f)`.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub loc: Vec<NodeId>,
    pub conf: Vec<NodeId>,
}

impl MultiboxHead {
    /// `classes` includes background.
    pub fn build<R: Rng + ?Sized>(
        level_channels: &[usize],
        level_sizes: &[usize],
        anchors: &[usize],
        classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if level_channels.len() != anchors.len() || level_sizes.len() != anchors.len() {
            return Err(Error::Config(format!(
                "head: {} pyramid levels but {} prior levels",
                level_channels.len(),
                anchors.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Config("head needs background plus at least one class".into()));
        }
        for (k, (&c, &a)) in level_channels.iter().zip(anchors).enumerate() {
            store.add_conv(&format!("{PREFIX}.loc{k}"), c, 4 * a, 3, rng)?;
            store.add_conv(&format!("{PREFIX}.conf{k}"), c, classes * a, 3, rng)?;
        }
        Ok(MultiboxHead {
            anchors: anchors.to_vec(),
            sizes: level_sizes.to_vec(),
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_priors(&self) -> usize {
        self.anchors.iter().zip(&self.sizes).map(|(a, f)| a * f * f).sum()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pyramid: &PyramidFeatures) -> Result<HeadOutputs> {
        if pyramid.sizes != self.sizes {
            return Err(Error::shape(
                "MultiboxHead::forward",
                format!("pyramid sizes {:?}, priors expect {:?}", pyramid.sizes, self.sizes),
            ));
        }
        let geo = ConvGeometry::new(1, 1);
        let mut loc = Vec::new();
        let mut conf = Vec::new();
        for (k, &x) in pyramid.levels.iter().enumerate() {
            loc.push(store.conv(g, &format!("{PREFIX}.loc{k}"), x, geo)?);
            conf.push(store.conv(g, &format!("{PREFIX}.conf{k}"), x, geo)?);
        }
        Ok(HeadOutputs { loc, conf })
    }

    /// Flattens to `(N, priors, 4)` and `(N, priors, K)` row-major buffers in
    /// (level, row, col, anchor) order; channel `anchor·width + j` holds
    /// component `j`.
    pub fn flatten(&self, g: &Graph, out: &HeadOutputs) -> Predictions {
        let loc: Vec<&Tensor> = out.loc.iter().map(|&n| g.value(n)).collect();
        let conf: Vec<&Tensor> = out.conf.iter().map(|&n| g.value(n)).collect();
        Predictions {
            batch: loc[0].batch(),
            priors: self.num_priors(),
            classes: self.classes,
            loc: flatten_levels(&loc, &self.anchors, 4),
            conf: flatten_levels(&conf, &self.anchors, self.classes),
        }
    }

    /// Inverse of [`flatten`](Self::flatten) for gradient buffers, ready to
    /// seed [`Graph::backward`].
    pub fn seeds(&self, g: &Graph, out: &HeadOutputs, loc_grad: &[f64], conf_grad: &[f64]) -> Vec<(NodeId, Tensor)> {
        let loc_shapes: Vec<_> = out.loc.iter().map(|&n| g.value(n).shape()).collect();
        let conf_shapes: Vec<_> = out.conf.iter().map(|&n| g.value(n).shape()).collect();
        let mut seeds: Vec<(NodeId, Tensor)> = out
            .loc
            .iter()
            .copied()
            .zip(unflatten_levels(loc_grad, &loc_shapes, &self.anchors, 4))
            .collect();
        seeds.extend(
            out.conf
                .iter()
                .copied()
                .zip(unflatten_levels(conf_grad, &conf_shapes, &self.anchors, self.classes)),
        );
        seeds
    }
}

fn total_priors(levels: &[[usize; 4]], anchors: &[usize]) -> usize {
    levels.iter().zip(anchors).map(|(s, a)| s[2] * s[3] * a).sum()
}

pub fn flatten_levels(levels: &[&Tensor], anchors: &[usize], width: usize) -> Vec<f64> {
    let shapes: Vec<_> = levels.iter().map(|t| t.shape()).collect();
    let p = total_priors(&shapes, anchors);
    let n = shapes[0][0];
    let mut out = vec![0.0; n * p * width];
    let mut offset = 0;
    for (t, &a) in levels.iter().zip(anchors) {
        let [_, c, h, w] = t.shape();
        debug_assert_eq!(c, a * width);
        for b in 0..n {
            for r in 0..h {
                for col in 0..w {
                    for k in 0..a {
                        let row = b * p + offset + (r * w + col) * a + k;
                        for j in 0..width {
                            out[row * width + j] = t.at(b, k * width + j, r, col);
                        }
                    }
                }
            }
        }
        offset += h * w * a;
    }
    out
}

pub fn unflatten_levels(flat: &[f64], shapes: &[[usize; 4]], anchors: &[usize], width: usize) -> Vec<Tensor> {
    let p = total_priors(shapes, anchors);
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for (&shape, &a) in shapes.iter().zip(anchors) {
        let [n, _, h, w] = shape;
        let mut t = Tensor::zeros(shape);
        for b in 0..n {
            for r in 0..h {
                for col in 0..w {
                    for k in 0..a {
                        let row = b * p + offset + (r * w + col) * a + k;
                        for j in 0..width {
                            let idx = t.index(b, k * width + j, r, col);
                            t.data_mut()[idx] = flat[row * width + j];
                        }
                    }
                }
            }
        }
        offset += h * w * a;
        out.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn flatten_order_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform([2, 2 * 3, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([2, 3 * 3, 1, 1], -1.0, 1.0, &mut rng);
        let flat = flatten_levels(&[&a, &b], &[2, 3], 3);
        let p = 2 * 4 + 3;
        assert_eq!(flat.len(), 2 * p * 3);
        // image 1, level 0, row 1, col 0, anchor 1, component 2
        let row = p + (2) * 2 + 1;
        assert_eq!(flat[row * 3 + 2], a.at(1, 3 + 2, 1, 0));
        // image 0, level 1, anchor 2, component 0
        assert_eq!(flat[(8 + 2) * 3], b.at(0, 6, 0, 0));
        let back = unflatten_levels(&flat, &[a.shape(), b.shape()], &[2, 3], 3);
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }

    #[test]
    fn zero_features_zero_bias_give_zero_predictions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = MultiboxHead::build(&[3, 3], &[4, 2], &[4, 6], 4, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let l0 = g.input(Tensor::zeros([1, 3, 4, 4]));
        let l1 = g.input(Tensor::zeros([1, 3, 2, 2]));
        let pyr = PyramidFeatures {
            levels: vec![l0, l1],
            sizes: vec![4, 2],
            channels: vec![3, 3],
        };
        let out = head.forward(&mut g, &store, &pyr).unwrap();
        let p = head.flatten(&g, &out);
        assert_eq!(p.priors, 4 * 16 + 6 * 4);
        assert!(p.loc.iter().chain(&p.conf).all(|&v| v == 0.0));
    }

    #[test]
    fn level_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiboxHead::build(&[3], &[4, 2], &[4, 6], 4, &mut store, &mut rng).is_err());
    }
}
