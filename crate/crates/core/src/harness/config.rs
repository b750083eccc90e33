//! The JSON run configuration: model keys at the top level (`backbone`,
//! `fusion`, `plain`, `priors`, `num_classes`) plus `train`, `eval`, `data`
//! and `ablate` sections. Every key is optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablate::AblateConfig;
use super::evaluate::EvalConfig;
use super::shapeworld::{generate_dataset, read_dataset, Dataset, ShapeWorldSpec};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: ShapeWorldSpec,
    pub test: ShapeWorldSpec,
    /// Read the split from a directory written by `write_dataset` instead
    /// of generating it.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: ShapeWorldSpec::default(),
            test: ShapeWorldSpec {
                seed: 1,
                num_images: 100,
                ..ShapeWorldSpec::default()
            },
            train_dir: None,
            test_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        match &self.model.fusion {
            Some(f) => f.validate(&self.model.backbone)?,
            None => self.model.plain.validate(&self.model.backbone)?,
        }
        self.train.validate()?;
        self.data.train.validate()?;
        self.data.test.validate()?;
        for s in [&self.data.train, &self.data.test] {
            if s.image_size as usize != self.model.input_size() {
                return Err(Error::Config(format!(
                    "data image_size {} differs from backbone.input_size {}",
                    s.image_size,
                    self.model.input_size()
                )));
            }
        }
        Ok(())
    }

    /// Dataset spec of a named split (`train` or `test`).
    pub fn split(&self, name: &str) -> Result<&ShapeWorldSpec> {
        match name {
            "train" => Ok(&self.data.train),
            "test" => Ok(&self.data.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    /// Loads or generates a named split.
    pub fn dataset(&self, name: &str) -> Result<Dataset> {
        let spec = self.split(name)?;
        let dir = if name == "train" { &self.data.train_dir } else { &self.data.test_dir };
        match dir {
            Some(d) => read_dataset(d),
            None => generate_dataset(spec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_keys_and_null_fusion() {
        let c = RunConfig::from_json(r#"{"fusion": null, "train": {"iterations": 5}, "num_classes": 3}"#).unwrap();
        assert!(c.model.fusion.is_none());
        assert_eq!(c.train.iterations, 5);
        assert_eq!(c.train.lr, 1e-3);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert!(back.model.fusion.is_none());
    }

    #[test]
    fn splits_are_generated_or_read() {
        let c = RunConfig::from_json(r#"{"data": {"test": {"num_images": 3, "seed": 9}}}"#).unwrap();
        let test = c.dataset("test").unwrap();
        assert_eq!(test.len(), 3);
        assert!(c.dataset("val").is_err());
        let dir = tempfile::tempdir().unwrap();
        super::super::shapeworld::write_dataset(&test, &c.data.test, dir.path()).unwrap();
        let mut c2 = c.clone();
        c2.data.test_dir = Some(dir.path().to_path_buf());
        assert_eq!(c2.dataset("test").unwrap().samples.len(), 3);
        assert_eq!(c2.dataset("test").unwrap().samples[2].boxes, test.samples[2].boxes);
    }

    #[test]
    fn mismatched_image_size_is_rejected() {
        let r = RunConfig::from_json(r#"{"data": {"train": {"image_size": 64}}}"#);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
