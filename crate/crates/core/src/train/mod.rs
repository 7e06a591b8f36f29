//! Training and evaluation: loss, optimizer, schedule, augmentation, metrics,
//! the synthetic dataset, and the training loop.

pub mod adam;
pub mod augment;
pub mod dataset;
pub mod loss;
pub mod metrics;
pub mod schedule;
pub mod trainer;

use std::fmt;

use crate::error::OpError;

pub use adam::{AdamConfig, AdamState};
pub use augment::{augment, augment_with, normalize_only, sample_draw, AugmentDraw, AugmentationPolicy};
pub use dataset::{class_color, generate, make_toy_dataset, stack_samples, ToyDatasetSpec};
pub use loss::cross_entropy_loss;
pub use metrics::{ConfusionMatrix, MiouResult};
pub use schedule::PolySchedule;
pub use trainer::{evaluate, train, EpochRecord, TrainLog, TrainOptions};

#[derive(Debug)]
pub enum TrainError {
    EpochOutOfRange { epoch: usize, max_epoch: usize },
    Diverged { epoch: usize, step: usize },
    NonFiniteGradient { param: String, step: u64 },
    EmptyDataset,
    Op(OpError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EpochOutOfRange { epoch, max_epoch } => {
                write!(f, "epoch {epoch} outside schedule range [0, {max_epoch}]")
            }
            TrainError::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
            TrainError::NonFiniteGradient { param, step } => {
                write!(f, "non-finite gradient for parameter {param} at step {step}")
            }
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::Op(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<OpError> for TrainError {
    fn from(e: OpError) -> Self {
        TrainError::Op(e)
    }
}
