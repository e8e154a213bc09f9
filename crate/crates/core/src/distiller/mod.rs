//! Teacher training and student distillation at desk scale.
//!
//! * [`data`]: procedural "coloured blobs" images standing in for a
//!   photo dataset.
//! * [`disc`]: a small strided-conv discriminator.
//! * [`losses`]: pixel L1, latent-direction relation loss, and the
//!   non-saturating GAN loss with R1.
//! * [`adam`]: the optimizer.
//! * [`train`]: the two training loops and their JSON-lines log.

pub mod adam;
pub mod data;
pub mod disc;
pub mod losses;
pub mod train;

pub use adam::Adam;
pub use data::{blob_batch, blob_image, synth_dataset_sample, DATASET_RESOLUTION};
pub use disc::{DiscConfig, Discriminator};
pub use losses::{
    direction_deltas, disc_input_gradient, disc_loss_gradient, distill_terms, gan_losses, is_student_trainable,
    loss_ld, loss_rgb, r1_param_gradient, relation_gram, relation_loss, student_objective, DistillTerms, GanLosses,
    TeacherTargets,
};
pub use train::{distill_student, train_teacher, LogRecord, TrainOptions, TrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthnet::{CheckpointError, SynthError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}{}", dump.as_ref().map(|d| format!("; state dumped to {}", d.display())).unwrap_or_default())]
    Diverged {
        step: usize,
        what: &'static str,
        dump: Option<std::path::PathBuf>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loss weights and optimizer settings shared by teacher training and
/// distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda_gan: f64,
    pub lambda_rgb: f64,
    /// Perceptual loss weight. No perceptual network is available, so this
    /// must stay 0.
    pub lambda_lpips: f64,
    pub lambda_ld: f64,
    /// Perturbation strength for the relation loss.
    pub ld_alpha: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub r1_gamma: f64,
    /// R1 is applied every this many discriminator steps, scaled up by the
    /// same factor.
    pub r1_interval: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_rgb: 3.0,
            lambda_lpips: 0.0,
            lambda_ld: 30.0,
            ld_alpha: 5.0,
            learning_rate: 2e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            r1_gamma: 10.0,
            r1_interval: 16,
            batch_size: 8,
            iterations: 5_000,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.lambda_lpips != 0.0 {
            return bad(format!("lambda_lpips must be 0, got {}", self.lambda_lpips));
        }
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_ld", self.lambda_ld),
            ("ld_alpha", self.ld_alpha),
            ("r1_gamma", self.r1_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.r1_interval == 0 {
            return bad("r1_interval must be >= 1".into());
        }
        Ok(())
    }
}
