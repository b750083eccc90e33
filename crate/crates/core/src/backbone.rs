//! Miniature VGG-style feature extractor.
//!
//! Each stage is `convs × (3×3 stride-1 conv + ReLU)` followed by a ceil-mode
//! 2×2 max-pool, so every stage maps a spatial size `s` to `ceil(s / 2)`.
//! Taps expose the pooled output of chosen stages under the VGG16 layer
//! names the fusion module refers to. With the default 300 preset the taps
//! land on 75 (`conv3_3`), 38 (`conv4_3`), 19 (`fc_7`) and 10 (`conv7_2`);
//! the last stage has a single convolution, standing in for the
//! stride-1 `conv6_2` trick that keeps `conv7_2` at 10×10.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{ConvGeometry, Tensor};

pub const CONV3_3: &str = "conv3_3";
pub const CONV4_3: &str = "conv4_3";
pub const FC_7: &str = "fc_7";
pub const CONV7_2: &str = "conv7_2";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapConfig {
    pub name: String,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    /// 3×3 convolutions per stage; same length as `stage_channels`.
    pub convs_per_stage: Vec<usize>,
    pub taps: Vec<TapConfig>,
}

fn default_taps() -> Vec<TapConfig> {
    [CONV3_3, CONV4_3, FC_7, CONV7_2]
        .iter()
        .enumerate()
        .map(|(i, n)| TapConfig {
            name: n.to_string(),
            stage: i + 1,
        })
        .collect()
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::preset(300)
    }
}

impl BackboneConfig {
    /// Desk-scale widths with the standard four taps.
    pub fn preset(input_size: usize) -> Self {
        BackboneConfig {
            input_size,
            stage_channels: vec![16, 32, 64, 128, 128],
            convs_per_stage: vec![2, 2, 2, 2, 1],
            taps: default_taps(),
        }
    }

    /// VGG16-like widths; only meant for shape checks.
    pub fn vgg_like(input_size: usize) -> Self {
        BackboneConfig {
            input_size,
            stage_channels: vec![64, 128, 256, 512, 1024],
            convs_per_stage: vec![2, 2, 3, 3, 1],
            taps: default_taps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("backbone.input_size must be positive".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.convs_per_stage.len() {
            return Err(Error::Config(
                "backbone.stage_channels and backbone.convs_per_stage must be non-empty and equal length".into(),
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone stage with zero width".into()));
        }
        if self.convs_per_stage.contains(&0) {
            return Err(Error::Config("backbone stage with zero convolutions".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("backbone needs at least one tap".into()));
        }
        for (i, t) in self.taps.iter().enumerate() {
            if t.stage >= self.stage_channels.len() {
                return Err(Error::Config(format!("tap `{}` references missing stage {}", t.name, t.stage)));
            }
            if self.taps[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate tap name `{}`", t.name)));
            }
            if i > 0 && t.stage <= self.taps[i - 1].stage {
                return Err(Error::Config("taps must reference strictly increasing stages".into()));
            }
        }
        Ok(())
    }

    /// Spatial size after each stage: repeated `ceil(s / 2)`.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        self.stage_channels
            .iter()
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }

    pub fn tap(&self, name: &str) -> Option<&TapConfig> {
        self.taps.iter().find(|t| t.name == name)
    }

    pub fn tap_size(&self, name: &str) -> Option<usize> {
        self.tap(name).map(|t| self.stage_sizes()[t.stage])
    }

    pub fn tap_channels(&self, name: &str) -> Option<usize> {
        self.tap(name).map(|t| self.stage_channels[t.stage])
    }

    /// Last stage any tap needs; later stages are never built.
    fn stages_needed(&self) -> usize {
        self.taps.iter().map(|t| t.stage + 1).max().unwrap_or(0)
    }
}

/// One source feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    pub name: String,
    pub node: NodeId,
    pub size: usize,
    pub channels: usize,
    /// Input pixels per feature cell.
    pub stride: usize,
}

/// Tap outputs in tap order; spatial sizes strictly decrease.
#[derive(Debug, Clone, Default)]
pub struct FeatureMapSet {
    maps: Vec<FeatureMap>,
}

impl FeatureMapSet {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.windows(2).any(|w| w[1].size >= w[0].size) {
            return Err(Error::Config("feature map sizes must strictly decrease".into()));
        }
        Ok(FeatureMapSet { maps })
    }

    pub fn get(&self, name: &str) -> Result<&FeatureMap> {
        self.maps
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::MissingTap(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureMap> {
        self.maps.iter()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.maps.iter().map(|m| m.name.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
}

pub const PREFIX: &str = "backbone";

impl Backbone {
    /// Validates `config` and registers its parameters in `store`.
    pub fn build<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_c = 3;
        for stage in 0..config.stages_needed() {
            let out_c = config.stage_channels[stage];
            for conv in 0..config.convs_per_stage[stage] {
                store.add_relu_conv(&Self::conv_name(stage, conv), in_c, out_c, 3, rng)?;
                in_c = out_c;
            }
        }
        Ok(Backbone { config })
    }

    fn conv_name(stage: usize, conv: usize) -> String {
        format!("{PREFIX}.stage{stage}.conv{conv}")
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Records the forward pass of `image` (a node of shape `(N, 3, S, S)`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: NodeId) -> Result<FeatureMapSet> {
        let [_, c, h, w] = g.value(image).shape();
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "Backbone::forward",
                format!("expected (N, 3, {s}, {s}), got {:?}", g.value(image).shape()),
            ));
        }
        let mut x = image;
        let mut maps = Vec::new();
        for stage in 0..self.config.stages_needed() {
            for conv in 0..self.config.convs_per_stage[stage] {
                x = store.conv(g, &Self::conv_name(stage, conv), x, ConvGeometry::new(1, 1))?;
                x = g.relu(x);
            }
            x = g.max_pool2d(x, 2, 2, true)?;
            for tap in self.config.taps.iter().filter(|t| t.stage == stage) {
                let size = g.value(x).height();
                maps.push(FeatureMap {
                    name: tap.name.clone(),
                    node: x,
                    size,
                    channels: g.value(x).channels(),
                    stride: 1 << (stage + 1),
                });
            }
        }
        FeatureMapSet::new(maps)
    }

    /// Inference-only convenience: runs the backbone on `image` and returns
    /// the tap tensors by name.
    pub fn features(&self, store: &ParamStore, image: Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut g = Graph::new();
        let x = g.constant(image);
        let maps = self.forward(&mut g, store, x)?;
        Ok(maps.iter().map(|m| (m.name.clone(), g.value(m.node).clone())).collect())
    }
}
