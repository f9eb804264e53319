//! Loss functions and training loops for the GAN branches, the two-stage
//! classifier and the transfer model.

mod adversarial;
mod batch;
mod losses;
mod pganc;
mod pgant;
mod report;

use serde::{Deserialize, Serialize};

use crate::diffnet::Precision;
use crate::error::{Error, Result};

pub use adversarial::{train_gan, GanTrainConfig};
pub use losses::{
    combine_transfer, cross_entropy_classbalanced, gan_losses, median_bandwidth, mmd2_rbf,
    transfer_losses, Bandwidth, GanLossValues, GanLossWeights, TransferLossValues, TransferWeights,
};
pub use pganc::{
    pretrain_branches, train_classifier_frozen, train_end_to_end, train_plain_cnn,
    train_two_stage_from, train_two_stage_pganc, DataFlowLog, PgancConfig, PgancOutcome,
    Pretrained,
};
pub use pgant::{
    audit_update, fit_pgant, fit_pgant_from, partition_update, train_pgant, GradientAudit,
    PgantOutcome, TransferConfig,
};
pub use report::{LossRecord, LossReport};

/// Optimizer and loop settings shared by every training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    #[serde(skip)]
    pub precision: Precision,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            patience: 10,
            precision: Precision::Standard,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Independent sub-seed for stream `k` of a run.
pub(crate) fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ (k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
