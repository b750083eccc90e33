//! Backbone + neck + multibox head wired into one detector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    downsample_size, pyramid_sizes, FusionConfig, FusionModule, Neck, PlainPyramid, PlainPyramidConfig,
};
use crate::multibox::{
    generate_priors, match_priors, mine_batch, multibox_loss, GroundTruth, HeadOutputs, LossOutput, MatchResult,
    MultiboxHead, Predictions, PriorBoxSet, PriorConfig, PriorSpec,
};
use crate::params::ParamStore;
use crate::postprocess::{assemble_detections, Detection, PostprocessConfig};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` selects the plain pyramid baseline.
    pub fusion: Option<FusionConfig>,
    pub plain: PlainPyramidConfig,
    pub priors: PriorConfig,
    /// Foreground classes; background is added on top.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::preset(300),
            fusion: Some(FusionConfig::default()),
            plain: PlainPyramidConfig::default(),
            priors: PriorConfig::default(),
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn preset(input_size: usize) -> Result<Self> {
        let fusion = match input_size {
            512 => FusionConfig::preset_512(),
            _ => FusionConfig::default(),
        };
        let mut plain = PlainPyramidConfig::default();
        if input_size == 512 {
            plain.extra_channels.push(256);
        }
        Ok(ModelConfig {
            backbone: BackboneConfig::preset(input_size),
            fusion: Some(fusion),
            plain,
            priors: PriorConfig::preset(input_size)?,
            num_classes: 3,
        })
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    /// Detection level sizes, computed without building any parameters.
    pub fn level_sizes(&self) -> Result<Vec<usize>> {
        let tap = |n: &str| self.backbone.tap_size(n).ok_or_else(|| Error::MissingTap(n.to_string()));
        match &self.fusion {
            Some(f) => {
                f.validate(&self.backbone)?;
                Ok(pyramid_sizes(tap(&f.base_layer)?, f.levels()))
            }
            None => {
                self.plain.validate(&self.backbone)?;
                let mut sizes = self.plain.source_layers.iter().map(|s| tap(s)).collect::<Result<Vec<_>>>()?;
                for _ in &self.plain.extra_channels {
                    sizes.push(downsample_size(*sizes.last().expect("validated non-empty")));
                }
                Ok(sizes)
            }
        }
    }

    pub fn prior_specs(&self) -> Result<Vec<PriorSpec>> {
        self.priors.specs(&self.level_sizes()?)
    }
}

/// Matching, mining and weighting of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub iou_threshold: f64,
    pub neg_pos_ratio: f64,
    pub loc_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            iou_threshold: 0.5,
            neg_pos_ratio: 3.0,
            loc_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: ModelConfig,
    backbone: Backbone,
    neck: Neck,
    head: MultiboxHead,
    priors: PriorBoxSet,
}

/// Loss of one batch together with the graph that produced it.
pub struct ForwardLoss {
    pub graph: Graph,
    pub head: HeadOutputs,
    pub predictions: Predictions,
    pub matches: Vec<MatchResult>,
    pub loss: LossOutput,
}

impl Detector {
    /// Registers every parameter in `store`, initialised from `rng`.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let backbone = Backbone::build(config.backbone.clone(), store, rng)?;
        let neck = match &config.fusion {
            Some(f) => Neck::Fusion(FusionModule::build(f.clone(), &config.backbone, store, rng)?),
            None => Neck::Plain(PlainPyramid::build(config.plain.clone(), &config.backbone, store, rng)?),
        };
        let sizes = neck.level_sizes();
        let priors = generate_priors(&config.priors.specs(&sizes)?)?;
        let head = MultiboxHead::build(
            &neck.level_channels(),
            &sizes,
            &priors.priors_per_location(),
            config.num_classes + 1,
            store,
            rng,
        )?;
        Ok(Detector {
            config,
            backbone,
            neck,
            head,
            priors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn priors(&self) -> &PriorBoxSet {
        &self.priors
    }

    pub fn neck(&self) -> &Neck {
        &self.neck
    }

    pub fn head(&self) -> &MultiboxHead {
        &self.head
    }

    /// Records the full network on `image`.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, image: NodeId, training: bool) -> Result<HeadOutputs> {
        let maps = self.backbone.forward(g, store, image)?;
        let pyramid = self.neck.forward(g, store, &maps, training)?;
        self.head.forward(g, store, &pyramid)
    }

    pub fn predict(&self, store: &mut ParamStore, images: &Tensor, training: bool) -> Result<Predictions> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, store, x, training)?;
        Ok(self.head.flatten(&g, &out))
    }

    pub fn match_batch(&self, gts: &[GroundTruth], cfg: &LossConfig) -> Vec<MatchResult> {
        gts.iter()
            .map(|gt| match_priors(gt, &self.priors, cfg.iou_threshold, &self.config.priors.variances))
            .collect()
    }

    /// Forward pass and loss without back-propagation.
    pub fn forward_loss(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        gts: &[GroundTruth],
        cfg: &LossConfig,
        training: bool,
    ) -> Result<ForwardLoss> {
        if gts.len() != images.batch() {
            return Err(Error::shape("Detector::forward_loss", "one annotation set per image required"));
        }
        let mut graph = Graph::new();
        let x = graph.constant(images.clone());
        let head = self.forward(&mut graph, store, x, training)?;
        let predictions = self.head.flatten(&graph, &head);
        let matches = self.match_batch(gts, cfg);
        let negatives = mine_batch(&predictions, &matches, cfg.neg_pos_ratio);
        let loss = multibox_loss(&predictions, &matches, &negatives, cfg.loc_weight)?;
        Ok(ForwardLoss {
            graph,
            head,
            predictions,
            matches,
            loss,
        })
    }

    /// Forward, loss and backward; parameter gradients are accumulated into
    /// `store`.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        gts: &[GroundTruth],
        cfg: &LossConfig,
    ) -> Result<LossOutput> {
        let fl = self.forward_loss(store, images, gts, cfg, true)?;
        let seeds = self.head.seeds(&fl.graph, &fl.head, &fl.loss.loc_grad, &fl.loss.conf_grad);
        let grads = fl.graph.backward(seeds)?;
        store.accumulate_grads(&fl.graph, &grads);
        Ok(fl.loss)
    }

    /// Inference-mode detections per image.
    pub fn detect(&self, store: &mut ParamStore, images: &Tensor, cfg: &PostprocessConfig) -> Result<Vec<Vec<Detection>>> {
        let pred = self.predict(store, images, false)?;
        (0..pred.batch)
            .map(|b| {
                assemble_detections(
                    pred.loc_image(b),
                    pred.conf_image(b),
                    pred.classes,
                    &self.priors,
                    &self.config.priors.variances,
                    cfg,
                )
            })
            .collect()
    }
}
