//! SSD detection machinery: priors, heads, matching, mining and the loss.

pub mod head;
pub mod loss;
pub mod matching;
pub mod mining;
pub mod priors;

pub use head::{HeadOutputs, MultiboxHead};
pub use loss::{mine_batch, multibox_loss, LossOutput};
pub use matching::{match_priors, GroundTruth, MatchResult};
pub use mining::hard_negative_mine;
pub use priors::{generate_priors, PriorBoxSet, PriorConfig, PriorSpec};

/// Flattened head outputs of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub batch: usize,
    pub priors: usize,
    /// Including background.
    pub classes: usize,
    /// `(batch, priors, 4)` row-major.
    pub loc: Vec<f64>,
    /// `(batch, priors, classes)` row-major logits.
    pub conf: Vec<f64>,
}

impl Predictions {
    pub fn loc_image(&self, b: usize) -> &[f64] {
        &self.loc[b * self.priors * 4..(b + 1) * self.priors * 4]
    }

    pub fn conf_image(&self, b: usize) -> &[f64] {
        let k = self.classes;
        &self.conf[b * self.priors * k..(b + 1) * self.priors * k]
    }
}
