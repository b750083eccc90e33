//! SGD training loop with deterministic batching and checkpoint resume.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, LoadReport};
use super::shapeworld::{images_to_tensor, Dataset, Sample};
use crate::error::{Error, Result};
use crate::fusion::PREFIX as FUSION_PREFIX;
use crate::model::{Detector, LossConfig, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{set_gemm_precision, GemmPrecision, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    /// Linear ramp from `lr / warmup_iterations` to `lr`.
    pub warmup_iterations: usize,
    pub batch_size: usize,
    pub fusion_lr_multiplier: f64,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    /// Only names with one of these prefixes are taken from
    /// `init_checkpoint`; all names when empty.
    pub init_prefixes: Vec<String>,
    /// Continue from the checkpoint's step and optimiser state instead of
    /// warm-starting at step 0.
    pub resume: bool,
    pub flip: bool,
    pub loss: LossConfig,
    pub precision: GemmPrecision,
    /// Parameters are rounded to checkpoint precision every this many
    /// iterations (0 = only at the end), so a run resumed from any snapshot
    /// continues bit-for-bit.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 2000,
            lr_steps: vec![1500],
            lr_gamma: 0.1,
            warmup_iterations: 0,
            batch_size: 8,
            fusion_lr_multiplier: 2.0,
            seed: 0,
            init_checkpoint: None,
            init_prefixes: Vec::new(),
            resume: false,
            flip: true,
            loss: LossConfig::default(),
            precision: GemmPrecision::F32,
            snapshot_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum outside [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_gamma > 0.0) || !(self.fusion_lr_multiplier > 0.0) {
            return bad("lr_gamma and fusion_lr_multiplier must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.loss.iou_threshold > 0.0 && self.loss.iou_threshold <= 1.0) {
            return bad("loss.iou_threshold outside (0, 1]");
        }
        if !(self.loss.neg_pos_ratio >= 0.0) || !(self.loss.loc_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// Learning rate used at 0-based `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| iteration >= s).count();
        let mut lr = self.lr * self.lr_gamma.powi(drops as i32);
        if iteration < self.warmup_iterations {
            lr *= (iteration + 1) as f64 / self.warmup_iterations as f64;
        }
        lr
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        if name.starts_with(FUSION_PREFIX) && name[FUSION_PREFIX.len()..].starts_with('.') {
            self.fusion_lr_multiplier
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// 1-based.
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub loc: f64,
    pub conf: f64,
    pub num_pos: usize,
}

/// Dataset indices of the batch trained at 0-based `iteration`: consecutive
/// slices of a per-epoch permutation seeded from `(seed, epoch)`.
pub fn batch_indices(seed: u64, len: usize, batch: usize, iteration: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = iteration * batch + j;
        let epoch = pos / len;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64 + 1);
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[pos % len]);
    }
    out
}

/// Per-image flip decisions for 0-based `iteration`.
pub fn flip_mask(seed: u64, batch: usize, iteration: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F11B);
    rng.set_stream(iteration as u64);
    (0..batch).map(|_| rng.gen_bool(0.5)).collect()
}

/// FNV-1a over the canonical JSON of the model configuration.
pub fn config_hash(config: &ModelConfig) -> u64 {
    let json = serde_json::to_string(config).expect("config serialises");
    json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Restores the previous GEMM precision on drop.
pub struct PrecisionGuard(GemmPrecision);

impl PrecisionGuard {
    pub fn set(p: GemmPrecision) -> Self {
        PrecisionGuard(set_gemm_precision(p))
    }
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set_gemm_precision(self.0);
    }
}

pub struct Trainer<'a> {
    pub detector: Detector,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub dataset: &'a Dataset,
    /// Completed iterations.
    pub step: usize,
    pub log: Vec<IterationLog>,
    pub config_hash: u64,
    pub init_report: Option<LoadReport>,
}

impl<'a> Trainer<'a> {
    /// Builds the model from `config.seed`, then applies `init_checkpoint`
    /// when one is configured.
    pub fn new(model: ModelConfig, config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        let init = match &config.init_checkpoint {
            Some(p) => Some(Checkpoint::load(p)?),
            None => None,
        };
        Self::with_init(model, config, dataset, init.as_ref())
    }

    pub fn with_init(
        model: ModelConfig,
        config: TrainConfig,
        dataset: &'a Dataset,
        init: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let size = model.input_size() as u32;
        if let Some(s) = dataset.samples.iter().find(|s| s.image.width != size || s.image.height != size) {
            return Err(Error::Config(format!(
                "image {} is {}×{}, model expects {size}×{size}",
                s.id, s.image.width, s.image.height
            )));
        }
        if let Some(s) = dataset.samples.iter().find(|s| s.labels.iter().any(|&l| l > model.num_classes)) {
            return Err(Error::Config(format!(
                "image {} has labels beyond num_classes = {}",
                s.id, model.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let hash = config_hash(&model);
        let detector = Detector::build(model, &mut store, &mut rng)?;
        let mut step = 0;
        let mut init_report = None;
        if let Some(ck) = init {
            let prefixes = config.init_prefixes.clone();
            let filter = |n: &str| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p.as_str()));
            let report = ck.apply(&mut store, hash, filter, config.resume);
            if config.resume {
                if report.hash_mismatch {
                    return Err(Error::Config("resume needs a checkpoint of the same model config".into()));
                }
                step = ck.step as usize;
            }
            init_report = Some(report);
        }
        Ok(Trainer {
            detector,
            store,
            config,
            dataset,
            step,
            log: Vec::new(),
            config_hash: hash,
            init_report,
        })
    }

    fn batch(&self, iteration: usize) -> (Vec<Sample>, Vec<bool>) {
        let n = self.config.batch_size;
        let idx = batch_indices(self.config.seed, self.dataset.len(), n, iteration);
        let flips = if self.config.flip {
            flip_mask(self.config.seed, n, iteration)
        } else {
            vec![false; n]
        };
        let samples = idx
            .iter()
            .zip(&flips)
            .map(|(&i, &f)| {
                let s = &self.dataset.samples[i];
                if f {
                    s.flip_horizontal()
                } else {
                    s.clone()
                }
            })
            .collect();
        (samples, flips)
    }

    /// Runs one iteration and returns its log entry.
    pub fn step_once(&mut self) -> Result<IterationLog> {
        let _guard = PrecisionGuard::set(self.config.precision);
        let it = self.step;
        let (samples, _) = self.batch(it);
        let images = images_to_tensor(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let gts: Vec<_> = samples.iter().map(Sample::ground_truth).collect();
        self.store.zero_grads();
        let out = self.detector.train_step(&mut self.store, &images, &gts, &self.config.loss)?;
        let diverged = |store: &ParamStore| Error::Diverged {
            iteration: it + 1,
            parameter: store.first_non_finite().unwrap_or("<loss>").to_string(),
        };
        if !out.total.is_finite() || self.store.first_non_finite().is_some() {
            return Err(diverged(&self.store));
        }
        let lr = self.config.lr_at(it);
        let opt = Sgd {
            momentum: self.config.momentum,
            weight_decay: self.config.weight_decay,
        };
        let cfg = &self.config;
        self.store.sgd_step(&opt, lr, |n| cfg.multiplier(n));
        if self.store.first_non_finite().is_some() {
            return Err(diverged(&self.store));
        }
        self.step += 1;
        if self.config.snapshot_every > 0 && self.step.is_multiple_of(self.config.snapshot_every) {
            self.store.quantize_to_f32();
        }
        let entry = IterationLog {
            iteration: self.step,
            lr,
            loss: out.total,
            loc: out.loc,
            conf: out.conf,
            num_pos: out.num_pos,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Trains up to `config.iterations`, calling `on_step` after each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &IterationLog)) -> Result<()> {
        while self.step < self.config.iterations {
            let entry = self.step_once()?;
            on_step(self, &entry);
        }
        self.store.quantize_to_f32();
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store, self.step as u64, self.config_hash);
        c.model_config = Some(serde_json::to_string(self.detector.config()).expect("config serialises"));
        c
    }
}

/// Mean of the `window` losses ending at 1-based `iteration`.
pub fn smoothed_loss(log: &[IterationLog], iteration: usize, window: usize) -> Option<f64> {
    if iteration == 0 || iteration > log.len() || window == 0 {
        return None;
    }
    let lo = iteration.saturating_sub(window);
    let xs = &log[lo..iteration];
    Some(xs.iter().map(|l| l.loss).sum::<f64>() / xs.len() as f64)
}
