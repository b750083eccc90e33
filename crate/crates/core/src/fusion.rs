//! Feature fusion and pyramid generation.
//!
//! The fusion module takes a set of backbone taps, projects each one with a
//! 1×1 convolution, brings it to the base layer's spatial size (2×2 max-pool
//! for a map exactly one ceil-halving larger, bilinear interpolation for
//! smaller maps), and merges all of them in a single step, by channel
//! concatenation or element-wise sum, optionally followed by one batch-norm
//! layer. A chain of down-sampling blocks then turns the fused map into the
//! detection pyramid. Three pyramid generators are available:
//!
//! * [`PyramidVariant::A`]: the fused map itself is the first detection map,
//!   followed by stride-2 `Conv3×3 + ReLU` blocks.
//! * [`PyramidVariant::B`]: a stride-1 `Conv3×3 + ReLU` on the fused map is
//!   the first detection map, followed by stride-2 simple blocks.
//! * [`PyramidVariant::C`]: as B, but down-sampling uses bottleneck blocks
//!   (`Conv1×1` to half width + ReLU, then stride-2 `Conv3×3` + ReLU).
//!
//! [`PlainPyramid`] is the no-fusion baseline: the taps themselves are the
//! first detection maps and extra simple blocks continue from the last one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureMapSet, CONV3_3, CONV4_3, CONV7_2, FC_7};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{ConvGeometry, ConvParams, Tensor};

pub const PREFIX: &str = "fusion";
pub const PLAIN_PREFIX: &str = "plain";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOp {
    Concat,
    ElementSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PyramidVariant {
    A,
    B,
    C,
}

/// How a source map reaches the base size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    Pool,
    Identity,
    Bilinear,
}

impl TransformMode {
    /// Mode that brings a map of `size` to `target`, if one exists.
    pub fn for_sizes(size: usize, target: usize) -> Option<Self> {
        match size.cmp(&target) {
            std::cmp::Ordering::Equal => Some(TransformMode::Identity),
            std::cmp::Ordering::Less => Some(TransformMode::Bilinear),
            std::cmp::Ordering::Greater if size.div_ceil(2) == target => Some(TransformMode::Pool),
            std::cmp::Ordering::Greater => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub source_layers: Vec<String>,
    pub projection_channels: Vec<usize>,
    pub fusion_op: FusionOp,
    pub normalize_after_fusion: bool,
    pub base_layer: String,
    pub pyramid_variant: PyramidVariant,
    /// One width per detection level. Variant A ignores entry 0, because its
    /// first level is the fused map.
    pub pyramid_channels: Vec<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            source_layers: vec![CONV4_3.into(), FC_7.into(), CONV7_2.into()],
            projection_channels: vec![256; 3],
            fusion_op: FusionOp::Concat,
            normalize_after_fusion: true,
            base_layer: CONV4_3.into(),
            pyramid_variant: PyramidVariant::B,
            pyramid_channels: vec![512, 512, 256, 256, 256, 256],
        }
    }
}

impl FusionConfig {
    /// Default configuration for a 512 input: one more pyramid level.
    pub fn preset_512() -> Self {
        FusionConfig {
            pyramid_channels: vec![512, 512, 256, 256, 256, 256, 256],
            ..Self::default()
        }
    }

    /// Fuse the given taps, all projected to `width` channels.
    pub fn with_sources(mut self, sources: &[&str], width: usize) -> Self {
        self.source_layers = sources.iter().map(|s| s.to_string()).collect();
        self.projection_channels = vec![width; sources.len()];
        self
    }

    pub fn levels(&self) -> usize {
        self.pyramid_channels.len()
    }

    pub fn fused_channels(&self) -> usize {
        match self.fusion_op {
            FusionOp::Concat => self.projection_channels.iter().sum(),
            FusionOp::ElementSum => self.projection_channels.first().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.source_layers.is_empty() {
            return Err(Error::Config("fusion.source_layers is empty".into()));
        }
        if self.projection_channels.len() != self.source_layers.len() {
            return Err(Error::Config(format!(
                "fusion.projection_channels has {} entries for {} sources",
                self.projection_channels.len(),
                self.source_layers.len()
            )));
        }
        if self.projection_channels.contains(&0) || self.pyramid_channels.contains(&0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if self.fusion_op == FusionOp::ElementSum
            && self.projection_channels.iter().any(|&c| c != self.projection_channels[0])
        {
            return Err(Error::Config("element-wise sum needs equal projection widths".into()));
        }
        if self.pyramid_channels.is_empty() {
            return Err(Error::Config("fusion.pyramid_channels is empty".into()));
        }
        for (i, s) in self.source_layers.iter().enumerate() {
            if self.source_layers[..i].contains(s) {
                return Err(Error::Config(format!("source `{s}` listed twice")));
            }
        }
        let base = backbone
            .tap_size(&self.base_layer)
            .ok_or_else(|| Error::MissingTap(self.base_layer.clone()))?;
        for s in &self.source_layers {
            let size = backbone.tap_size(s).ok_or_else(|| Error::MissingTap(s.clone()))?;
            if TransformMode::for_sizes(size, base).is_none() {
                return Err(Error::Config(format!(
                    "source `{s}` ({size}×{size}) cannot be brought to base {base}×{base}"
                )));
            }
        }
        Ok(())
    }
}

/// Spatial size produced by one down-sampling block: `ceil(s / 2)`, except
/// that a 3×3 map collapses to 1×1 through an unpadded 3×3 convolution.
pub fn downsample_size(size: usize) -> usize {
    if size == 3 {
        1
    } else {
        size.div_ceil(2)
    }
}

/// Geometry of the stride-2 3×3 convolution realising [`downsample_size`].
pub fn downsample_geometry(size: usize) -> ConvGeometry {
    ConvGeometry::new(2, if size == 3 { 0 } else { 1 })
}

/// Closed-form pyramid sizes starting at `base`.
pub fn pyramid_sizes(base: usize, levels: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(levels);
    let mut s = base;
    for i in 0..levels {
        if i > 0 {
            s = downsample_size(s);
        }
        sizes.push(s);
    }
    sizes
}

/// Detection maps, largest first.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<NodeId>,
    pub sizes: Vec<usize>,
    pub channels: Vec<usize>,
}

impl PyramidFeatures {
    fn from_nodes(g: &Graph, levels: Vec<NodeId>) -> Self {
        let sizes = levels.iter().map(|&n| g.value(n).height()).collect();
        let channels = levels.iter().map(|&n| g.value(n).channels()).collect();
        PyramidFeatures {
            levels,
            sizes,
            channels,
        }
    }
}

/// The fused map and the per-source transformed maps that produced it.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub node: NodeId,
    pub transformed: Vec<NodeId>,
}

/// Projection followed by pool / identity / bilinear resize to `target`.
pub fn transform_source(
    g: &mut Graph,
    store: &ParamStore,
    proj_prefix: &str,
    x: NodeId,
    target: usize,
    mode: TransformMode,
) -> Result<NodeId> {
    let size = g.value(x).height();
    let y = store.conv(g, proj_prefix, x, ConvGeometry::new(1, 0))?;
    match mode {
        TransformMode::Identity if size == target => Ok(y),
        TransformMode::Pool if size.div_ceil(2) == target => g.max_pool2d(y, 2, 2, true),
        TransformMode::Bilinear => g.bilinear_resize(y, target, target),
        _ => Err(Error::shape(
            "transform_source",
            format!("{mode:?} cannot map {size}×{size} to {target}×{target}"),
        )),
    }
}

/// Tensor-level [`transform_source`] with explicit projection parameters.
pub fn transform_tensor(x: &Tensor, target: usize, mode: TransformMode, proj: &ConvParams) -> Result<Tensor> {
    let mut store = ParamStore::new();
    store.insert("proj.weight", proj.weights.clone(), crate::params::ParamKind::Trainable);
    let bias = Tensor::from_vec(crate::params::vector_shape(proj.bias.len()), proj.bias.clone())?;
    store.insert("proj.bias", bias, crate::params::ParamKind::Trainable);
    let mut g = Graph::new();
    let xin = g.constant(x.clone());
    let y = transform_source(&mut g, &store, "proj", xin, target, mode)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    config: FusionConfig,
    base_size: usize,
    source_sizes: Vec<usize>,
}

impl FusionModule {
    pub fn build<R: Rng + ?Sized>(
        config: FusionConfig,
        backbone: &BackboneConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(backbone)?;
        let base_size = backbone.tap_size(&config.base_layer).expect("validated");
        let mut source_sizes = Vec::new();
        for (src, &width) in config.source_layers.iter().zip(&config.projection_channels) {
            let in_c = backbone.tap_channels(src).expect("validated");
            store.add_conv(&Self::proj_name(src), in_c, width, 1, rng)?;
            source_sizes.push(backbone.tap_size(src).expect("validated"));
        }
        let fused = config.fused_channels();
        if config.normalize_after_fusion {
            store.add_batch_norm(&format!("{PREFIX}.bn"), fused);
        }
        let mut in_c = fused;
        for (level, &width) in config.pyramid_channels.iter().enumerate() {
            let name = Self::level_name(level);
            match (level, config.pyramid_variant) {
                (0, PyramidVariant::A) => continue,
                (0, _) | (_, PyramidVariant::A | PyramidVariant::B) => {
                    store.add_relu_conv(&name, in_c, width, 3, rng)?;
                }
                (_, PyramidVariant::C) => {
                    let hidden = (width / 2).max(1);
                    store.add_relu_conv(&format!("{name}.reduce"), in_c, hidden, 1, rng)?;
                    store.add_relu_conv(&format!("{name}.conv"), hidden, width, 3, rng)?;
                }
            }
            in_c = width;
        }
        Ok(FusionModule {
            config,
            base_size,
            source_sizes,
        })
    }

    fn proj_name(source: &str) -> String {
        format!("{PREFIX}.proj.{source}")
    }

    fn level_name(level: usize) -> String {
        format!("{PREFIX}.pyramid.level{level}")
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn transform_modes(&self) -> Vec<TransformMode> {
        self.source_sizes
            .iter()
            .map(|&s| TransformMode::for_sizes(s, self.base_size).expect("validated"))
            .collect()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        pyramid_sizes(self.base_size, self.config.levels())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        let mut c = self.config.pyramid_channels.clone();
        if self.config.pyramid_variant == PyramidVariant::A {
            c[0] = self.config.fused_channels();
        }
        c
    }

    /// Transforms every configured source to the base size.
    pub fn transform_all(&self, g: &mut Graph, store: &ParamStore, maps: &FeatureMapSet) -> Result<Vec<NodeId>> {
        let modes = self.transform_modes();
        self.config
            .source_layers
            .iter()
            .zip(modes)
            .map(|(src, mode)| {
                let m = maps.get(src)?;
                transform_source(g, store, &Self::proj_name(src), m.node, self.base_size, mode)
            })
            .collect()
    }

    /// Concatenation or element-wise sum, then the optional batch norm.
    pub fn fuse(&self, g: &mut Graph, store: &mut ParamStore, transformed: &[NodeId], training: bool) -> Result<NodeId> {
        for &t in transformed {
            if g.value(t).height() != self.base_size || g.value(t).width() != self.base_size {
                return Err(Error::shape("fuse", "input not at base size"));
            }
        }
        let merged = match self.config.fusion_op {
            FusionOp::Concat => g.concat_channels(transformed)?,
            FusionOp::ElementSum => {
                let c0 = g.value(transformed[0]).channels();
                if transformed.iter().any(|&t| g.value(t).channels() != c0) {
                    return Err(Error::shape("fuse", "element-wise sum of unequal widths"));
                }
                g.add(transformed)?
            }
        };
        if self.config.normalize_after_fusion {
            store.batch_norm(g, &format!("{PREFIX}.bn"), merged, training)
        } else {
            Ok(merged)
        }
    }

    pub fn generate_pyramid(&self, g: &mut Graph, store: &ParamStore, fused: NodeId) -> Result<PyramidFeatures> {
        let mut levels = Vec::with_capacity(self.config.levels());
        let mut prev = fused;
        for level in 0..self.config.levels() {
            let name = Self::level_name(level);
            let size = g.value(prev).height();
            let out = match (level, self.config.pyramid_variant) {
                (0, PyramidVariant::A) => fused,
                (0, _) => {
                    let y = store.conv(g, &name, prev, ConvGeometry::new(1, 1))?;
                    g.relu(y)
                }
                (_, PyramidVariant::A | PyramidVariant::B) => {
                    let y = store.conv(g, &name, prev, downsample_geometry(size))?;
                    g.relu(y)
                }
                (_, PyramidVariant::C) => {
                    let r = store.conv(g, &format!("{name}.reduce"), prev, ConvGeometry::new(1, 0))?;
                    let r = g.relu(r);
                    let y = store.conv(g, &format!("{name}.conv"), r, downsample_geometry(size))?;
                    g.relu(y)
                }
            };
            levels.push(out);
            prev = out;
        }
        Ok(PyramidFeatures::from_nodes(g, levels))
    }

    /// Transform → fuse → pyramid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        maps: &FeatureMapSet,
        training: bool,
    ) -> Result<(FusedFeature, PyramidFeatures)> {
        let transformed = self.transform_all(g, store, maps)?;
        let node = self.fuse(g, store, &transformed, training)?;
        let pyramid = self.generate_pyramid(g, store, node)?;
        Ok((FusedFeature { node, transformed }, pyramid))
    }
}

/// No-fusion baseline: backbone taps feed the heads directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlainPyramidConfig {
    pub source_layers: Vec<String>,
    /// Widths of the stride-2 blocks appended after the last source.
    pub extra_channels: Vec<usize>,
}

impl Default for PlainPyramidConfig {
    fn default() -> Self {
        PlainPyramidConfig {
            source_layers: vec![CONV4_3.into(), FC_7.into(), CONV7_2.into()],
            extra_channels: vec![256, 256, 256],
        }
    }
}

impl PlainPyramidConfig {
    pub fn levels(&self) -> usize {
        self.source_layers.len() + self.extra_channels.len()
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.source_layers.is_empty() {
            return Err(Error::Config("plain pyramid needs at least one source".into()));
        }
        if self.extra_channels.contains(&0) {
            return Err(Error::Config("plain pyramid widths must be positive".into()));
        }
        let mut prev = usize::MAX;
        for s in &self.source_layers {
            let size = backbone.tap_size(s).ok_or_else(|| Error::MissingTap(s.clone()))?;
            if size >= prev {
                return Err(Error::Config("plain pyramid sources must shrink".into()));
            }
            prev = size;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlainPyramid {
    config: PlainPyramidConfig,
    sizes: Vec<usize>,
    channels: Vec<usize>,
}

impl PlainPyramid {
    pub fn build<R: Rng + ?Sized>(
        config: PlainPyramidConfig,
        backbone: &BackboneConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(backbone)?;
        let mut sizes: Vec<usize> = config
            .source_layers
            .iter()
            .map(|s| backbone.tap_size(s).expect("validated"))
            .collect();
        let mut channels: Vec<usize> = config
            .source_layers
            .iter()
            .map(|s| backbone.tap_channels(s).expect("validated"))
            .collect();
        for (k, &w) in config.extra_channels.iter().enumerate() {
            store.add_relu_conv(&format!("{PLAIN_PREFIX}.extra{k}"), *channels.last().unwrap(), w, 3, rng)?;
            sizes.push(downsample_size(*sizes.last().unwrap()));
            channels.push(w);
        }
        Ok(PlainPyramid {
            config,
            sizes,
            channels,
        })
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.sizes.clone()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channels.clone()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, maps: &FeatureMapSet) -> Result<PyramidFeatures> {
        let mut levels = Vec::new();
        for s in &self.config.source_layers {
            levels.push(maps.get(s)?.node);
        }
        let mut prev = *levels.last().unwrap();
        for k in 0..self.config.extra_channels.len() {
            let size = g.value(prev).height();
            let y = store.conv(g, &format!("{PLAIN_PREFIX}.extra{k}"), prev, downsample_geometry(size))?;
            prev = g.relu(y);
            levels.push(prev);
        }
        Ok(PyramidFeatures::from_nodes(g, levels))
    }
}

/// Either the fusion module or the plain baseline.
#[derive(Debug, Clone)]
pub enum Neck {
    Fusion(FusionModule),
    Plain(PlainPyramid),
}

impl Neck {
    pub fn level_sizes(&self) -> Vec<usize> {
        match self {
            Neck::Fusion(f) => f.level_sizes(),
            Neck::Plain(p) => p.level_sizes(),
        }
    }

    pub fn level_channels(&self) -> Vec<usize> {
        match self {
            Neck::Fusion(f) => f.level_channels(),
            Neck::Plain(p) => p.level_channels(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        maps: &FeatureMapSet,
        training: bool,
    ) -> Result<PyramidFeatures> {
        match self {
            Neck::Fusion(f) => Ok(f.forward(g, store, maps, training)?.1),
            Neck::Plain(p) => p.forward(g, store, maps),
        }
    }
}

/// Every tap name the fusion module may draw from, largest first.
pub const FUSABLE_LAYERS: [&str; 4] = [CONV3_3, CONV4_3, FC_7, CONV7_2];
