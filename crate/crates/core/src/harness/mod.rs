//! Dataset, training, checkpoints, evaluation reports and ablation grids.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod inference;
pub mod shapeworld;
pub mod train;

pub use ablate::{run_ablation, AblateConfig, AblationReport, AxesSpec};
pub use checkpoint::{Checkpoint, LoadReport};
pub use config::{DataConfig, RunConfig};
pub use evaluate::{evaluate, EvalConfig, EvalReport};
pub use inference::{detect_image, load_detector, ImageDetection};
pub use shapeworld::{generate_dataset, Dataset, RgbImage, Sample, ShapeWorldSpec};
pub use train::{config_hash, TrainConfig, Trainer};
